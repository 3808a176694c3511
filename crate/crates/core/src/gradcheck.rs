//! Central finite-difference check of the clustering layers' gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{encode, pool, ClusterLayerParams, FeatureMap, LayerOptions};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BackwardFault, Geometry, Tape, Tensor};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Result for one parameter group of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub layer: &'static str,
    pub group: &'static str,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude in the group.
    pub max_abs_grad: f64,
    pub checked: usize,
    /// Elements whose perturbation changed a cluster assignment.
    pub skipped: usize,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Copy)]
enum Which {
    Encode,
    Pool,
}

struct Fixture {
    which: Which,
    store: ParamStore<f64>,
    layer: ClusterLayerParams,
    input: Tensor<f64>,
    weights: Tensor<f64>,
    geom: Geometry,
}

impl Fixture {
    fn new(which: Which, rng: &mut ChaCha8Rng) -> Self {
        let geom = Geometry::new(2, 4, 4);
        let c = 4;
        let mut store = ParamStore::new();
        let (layer, c_out) = match which {
            Which::Encode => {
                let opts = LayerOptions { norm: false, ..LayerOptions::default() };
                (ClusterLayerParams::new_encode(&mut store, "encode", c, 3, (2, 2), &opts, rng), c)
            }
            Which::Pool => {
                let opts = LayerOptions::default();
                (ClusterLayerParams::new_pool(&mut store, "pool", c, 5, &opts, rng), 5)
            }
        };
        // move α, β and the norm affine off their neutral initial values
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).value.rank() < 2 {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
        }
        let input = random(rng, &[geom.rows(), c]);
        let out_rows = match which {
            Which::Encode => geom.rows(),
            Which::Pool => geom.rows() / 4,
        };
        let weights = random(rng, &[out_rows, c_out]);
        Self { which, store, layer, input, weights, geom }
    }

    /// Loss `Σ w ⊙ out` and the assignments that produced it.
    fn loss(&self, tape: &mut Tape<f64>, bound: &[crate::tensor::Var]) -> Result<(crate::tensor::Var, Vec<usize>)> {
        let x = tape.constant(self.input.clone());
        let feat = FeatureMap::new(x, self.geom);
        let (out, result) = match self.which {
            Which::Encode => encode(tape, &feat, &self.layer, bound)?,
            Which::Pool => pool(tape, &feat, &self.layer, bound)?,
        };
        let w = tape.constant(self.weights.clone());
        let prod = tape.mul(out.var, w)?;
        Ok((tape.sum_all(prod), result.assignment))
    }

    fn eval(&self) -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let (l, a) = self.loss(&mut tape, &bound)?;
        Ok((tape.value(l).item(), a))
    }

    fn check(&mut self, name: &'static str, fault: Option<BackwardFault>) -> Result<Vec<GroupReport>> {
        let mut tape = match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        let bound = self.store.bind(&mut tape, true);
        let (loss, base_assign) = self.loss(&mut tape, &bound)?;
        tape.backward(loss)?;
        let grads = self.store.grads(&tape, &bound);
        drop(tape);

        let mut reports = Vec::new();
        for (group, ids) in self.layer.groups() {
            let mut rep =
                GroupReport { layer: name, group, max_rel_err: 0.0, max_abs_grad: 0.0, checked: 0, skipped: 0 };
            for id in ids {
                self.check_param(id, &grads[id.index()], &base_assign, &mut rep)?;
            }
            reports.push(rep);
        }
        Ok(reports)
    }

    fn check_param(&mut self, id: ParamId, grad: &Tensor<f64>, base: &[usize], rep: &mut GroupReport) -> Result<()> {
        for i in 0..grad.len() {
            let orig = self.store.value(id).data()[i];
            self.store.value_mut(id).data_mut()[i] = orig + STEP;
            let (plus, a_plus) = self.eval()?;
            self.store.value_mut(id).data_mut()[i] = orig - STEP;
            let (minus, a_minus) = self.eval()?;
            self.store.value_mut(id).data_mut()[i] = orig;
            if a_plus != base || a_minus != base {
                rep.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grad.data()[i];
            rep.max_rel_err = rep.max_rel_err.max(relative_error(analytic, numeric));
            rep.max_abs_grad = rep.max_abs_grad.max(analytic.abs());
            rep.checked += 1;
        }
        Ok(())
    }
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Checks one encoding layer (no normalization) and one pooling layer in
/// 64-bit. `fault` corrupts a backward rule, for negative controls.
pub fn run(seed: u64, fault: Option<BackwardFault>) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Fixture::new(Which::Encode, &mut rng).check("encode", fault)?;
    reports.extend(Fixture::new(Which::Pool, &mut rng).check("pool", fault)?);
    Ok(reports)
}

//! Per-pair losses of a batch, the weighted objective `sum_i w_i L_i` and its
//! parameter gradients. Weights are constants of the batch.

use super::model::{EncoderGrads, ToyEncoder, ViewActivations};
use super::{Result, TrainerError};
use crate::losses::{self, LossError};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossFamily {
    /// Anchor `z_a`, positive `z_b`, negatives the other first-view `z_a`.
    #[default]
    InfoNce,
    /// Symmetrized negative cosine between predictions and detached targets.
    NegCosine,
    /// Swapped prediction of Sinkhorn-Knopp prototype assignments.
    Swav,
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InfoNce => "info_nce",
            Self::NegCosine => "neg_cosine",
            Self::Swav => "swav",
        })
    }
}

impl std::str::FromStr for LossFamily {
    type Err = TrainerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "info_nce" | "infonce" => Ok(Self::InfoNce),
            "neg_cosine" => Ok(Self::NegCosine),
            "swav" | "swav_kl" => Ok(Self::Swav),
            other => Err(TrainerError::InvalidConfig(format!("unknown loss family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub family: LossFamily,
    pub tau: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub swav_temperature: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            family: LossFamily::InfoNce,
            tau: losses::DEFAULT_TAU,
            sinkhorn_epsilon: losses::DEFAULT_SINKHORN_EPSILON,
            sinkhorn_iterations: losses::DEFAULT_SINKHORN_ITERATIONS,
            swav_temperature: 0.1,
        }
    }
}

/// Quantities that receive no gradient within a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenTargets {
    None,
    /// Detached `z` of each view.
    Embeddings {
        z_a: Vec<Vec<f64>>,
        z_b: Vec<Vec<f64>>,
    },
    /// Row-normalized Sinkhorn-Knopp assignments of each view.
    Assignments {
        t_a: Matrix,
        t_b: Matrix,
    },
}

fn unit(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = tensor::norm(x);
    if n <= tensor::ZERO_NORM {
        return Err(LossError::ZeroVector.into());
    }
    Ok((x.iter().map(|v| v / n).collect(), n))
}

/// Pulls a gradient w.r.t. `u = x / |x|` back to `x`.
fn unnormalize(g: &[f64], u: &[f64], n: f64) -> Vec<f64> {
    let gu = tensor::dot(g, u);
    g.iter().zip(u).map(|(gi, ui)| (gi - gu * ui) / n).collect()
}

fn prototype_scores(prototypes: &Matrix, acts: &[ViewActivations]) -> Result<Matrix> {
    let rows = acts
        .iter()
        .map(|a| Ok(prototypes.matvec(&unit(&a.z)?.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

fn require_prototypes(encoder: &ToyEncoder) -> Result<&Matrix> {
    encoder
        .prototypes
        .as_ref()
        .ok_or_else(|| TrainerError::InvalidConfig("swav needs prototypes > 0".into()))
}

/// Computes the detached targets for the current forward pass.
pub fn batch_targets(
    encoder: &ToyEncoder,
    settings: &LossSettings,
    acts_a: &[ViewActivations],
    acts_b: &[ViewActivations],
) -> Result<FrozenTargets> {
    match settings.family {
        LossFamily::InfoNce => Ok(FrozenTargets::None),
        LossFamily::NegCosine => Ok(FrozenTargets::Embeddings {
            z_a: acts_a.iter().map(|a| a.z.clone()).collect(),
            z_b: acts_b.iter().map(|a| a.z.clone()).collect(),
        }),
        LossFamily::Swav => {
            let c = require_prototypes(encoder)?;
            let sk = |acts: &[ViewActivations]| -> Result<Matrix> {
                let scores = prototype_scores(c, acts)?;
                let a = losses::sinkhorn_knopp(&scores, settings.sinkhorn_epsilon, settings.sinkhorn_iterations)?;
                Ok(a.row_distributions())
            };
            Ok(FrozenTargets::Assignments {
                t_a: sk(acts_a)?,
                t_b: sk(acts_b)?,
            })
        }
    }
}

/// Objective value, unweighted per-pair losses and parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub value: f64,
    pub losses: Vec<f64>,
    pub grads: EncoderGrads,
}

struct ViewGrads {
    dz: Vec<Vec<f64>>,
    dp: Vec<Vec<f64>>,
}

impl ViewGrads {
    fn new(n: usize, dim: usize) -> Self {
        Self {
            dz: vec![vec![0.0; dim]; n],
            dp: vec![vec![0.0; dim]; n],
        }
    }

    /// Routes a gradient w.r.t. the prediction to `p`, or to `z` when the
    /// encoder has no predictor.
    fn add_prediction(&mut self, i: usize, scale: f64, g: &[f64], has_predictor: bool) {
        let target = if has_predictor {
            &mut self.dp[i]
        } else {
            &mut self.dz[i]
        };
        tensor::axpy(scale, g, target);
    }
}

/// `sum_i w_i L_i` over a batch of forward passes, with gradients of that sum.
pub fn batch_objective(
    encoder: &ToyEncoder,
    settings: &LossSettings,
    acts_a: &[ViewActivations],
    acts_b: &[ViewActivations],
    weights: &[f64],
    targets: &FrozenTargets,
) -> Result<BatchObjective> {
    let n = acts_a.len();
    if n == 0 || acts_b.len() != n || weights.len() != n {
        return Err(TrainerError::ShapeMismatch(format!(
            "batch of {} / {} views with {} weights",
            n,
            acts_b.len(),
            weights.len()
        )));
    }
    let dim = encoder.embed_dim();
    let has_predictor = encoder.w3.is_some();
    let mut ga = ViewGrads::new(n, dim);
    let mut gb = ViewGrads::new(n, dim);
    let mut grads = encoder.zero_grads();
    let mut pair_losses = Vec::with_capacity(n);

    match (settings.family, targets) {
        (LossFamily::InfoNce, _) => {
            for i in 0..n {
                let negatives: Vec<&[f64]> = (0..n).filter(|&j| j != i).map(|j| acts_a[j].z.as_slice()).collect();
                let g = losses::info_nce_with_grad(&acts_a[i].z, &acts_b[i].z, &negatives, settings.tau)?;
                let w = weights[i];
                tensor::axpy(w, &g.d_anchor, &mut ga.dz[i]);
                tensor::axpy(w, &g.d_positive, &mut gb.dz[i]);
                for (d, j) in g.d_negatives.iter().zip((0..n).filter(|&j| j != i)) {
                    tensor::axpy(w, d, &mut ga.dz[j]);
                }
                pair_losses.push(g.loss);
            }
        }
        (LossFamily::NegCosine, FrozenTargets::Embeddings { z_a, z_b }) => {
            for i in 0..n {
                let (la, dpa, _) = losses::neg_cosine_with_grad(acts_a[i].prediction(), &z_b[i])?;
                let (lb, dpb, _) = losses::neg_cosine_with_grad(acts_b[i].prediction(), &z_a[i])?;
                let w = 0.5 * weights[i];
                ga.add_prediction(i, w, &dpa, has_predictor);
                gb.add_prediction(i, w, &dpb, has_predictor);
                pair_losses.push(0.5 * (la + lb));
            }
        }
        (LossFamily::Swav, FrozenTargets::Assignments { t_a, t_b }) => {
            let c = require_prototypes(encoder)?;
            let temp = settings.swav_temperature;
            let scores_a = prototype_scores(c, acts_a)?;
            let scores_b = prototype_scores(c, acts_b)?;
            let q_a = losses::softmax_rows(&scores_a, temp)?;
            let q_b = losses::softmax_rows(&scores_b, temp)?;
            let gc = grads
                .prototypes
                .as_mut()
                .expect("prototype grads exist with prototypes");
            for i in 0..n {
                let l = 0.5
                    * (losses::kl_divergence(t_b.row(i), q_a.row(i)) + losses::kl_divergence(t_a.row(i), q_b.row(i)));
                pair_losses.push(l);
                let w = 0.5 * weights[i];
                for (acts, q, t, view) in [(acts_a, &q_a, t_b, &mut ga), (acts_b, &q_b, t_a, &mut gb)] {
                    let ds: Vec<f64> = q.row(i).iter().zip(t.row(i)).map(|(q, t)| w * (q - t) / temp).collect();
                    let (u, norm) = unit(&acts[i].z)?;
                    gc.add_outer(1.0, &ds, &u);
                    let du = c.matvec_transposed(&ds);
                    tensor::axpy(1.0, &unnormalize(&du, &u, norm), &mut view.dz[i]);
                }
            }
        }
        (family, _) => {
            return Err(TrainerError::InvalidConfig(format!(
                "targets do not match loss family {family}"
            )));
        }
    }

    let value: f64 = weights.iter().zip(&pair_losses).map(|(w, l)| w * l).sum();
    for (acts, view) in [(acts_a, &ga), (acts_b, &gb)] {
        for (i, act) in acts.iter().enumerate() {
            let dp = has_predictor.then_some(view.dp[i].as_slice());
            encoder.backward(act, &view.dz[i], dp, &mut grads)?;
        }
    }
    Ok(BatchObjective {
        value,
        losses: pair_losses,
        grads,
    })
}

/// Forward passes for the two views of every pair.
pub fn forward_batch(
    encoder: &ToyEncoder,
    inputs_a: &[&[f64]],
    inputs_b: &[&[f64]],
) -> Result<(Vec<ViewActivations>, Vec<ViewActivations>)> {
    let a = inputs_a.iter().map(|x| encoder.forward(x)).collect::<Result<_>>()?;
    let b = inputs_b.iter().map(|x| encoder.forward(x)).collect::<Result<_>>()?;
    Ok((a, b))
}

/// Objective value only, with externally supplied frozen targets.
pub fn objective_value(
    encoder: &ToyEncoder,
    settings: &LossSettings,
    inputs_a: &[&[f64]],
    inputs_b: &[&[f64]],
    weights: &[f64],
    targets: &FrozenTargets,
) -> Result<f64> {
    let (a, b) = forward_batch(encoder, inputs_a, inputs_b)?;
    Ok(batch_objective(encoder, settings, &a, &b, weights, targets)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::{EncoderConfig, Nonlinearity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn setup(family: LossFamily, predictor: bool) -> (ToyEncoder, Vec<Vec<f64>>, Vec<Vec<f64>>, LossSettings) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = ToyEncoder::new(
            &EncoderConfig {
                input_dim: 6,
                hidden_dim: 5,
                embed_dim: 4,
                predictor,
                prototypes: if family == LossFamily::Swav { 3 } else { 0 },
                nonlinearity: Nonlinearity::Tanh,
                init_gain: 1.0,
            },
            &mut rng,
        )
        .unwrap();
        let mut draw = || (0..6).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
        let a: Vec<Vec<f64>> = (0..4).map(|_| draw()).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| draw()).collect();
        let settings = LossSettings {
            family,
            ..Default::default()
        };
        (enc, a, b, settings)
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn info_nce_pair_losses_match_direct_calls() {
        let (enc, a, b, settings) = setup(LossFamily::InfoNce, false);
        let (fa, fb) = forward_batch(&enc, &refs(&a), &refs(&b)).unwrap();
        let w = [0.25; 4];
        let obj = batch_objective(&enc, &settings, &fa, &fb, &w, &FrozenTargets::None).unwrap();
        for i in 0..4 {
            let negs: Vec<&[f64]> = (0..4).filter(|&j| j != i).map(|j| fa[j].z.as_slice()).collect();
            let direct = losses::info_nce(&fa[i].z, &fb[i].z, &negs, settings.tau).unwrap();
            assert!((obj.losses[i] - direct).abs() < 1e-14);
        }
        let mean = obj.losses.iter().sum::<f64>() / 4.0;
        assert!((obj.value - mean).abs() < 1e-14);
    }

    #[test]
    fn neg_cosine_target_branch_receives_no_gradient() {
        let (enc, a, b, settings) = setup(LossFamily::NegCosine, true);
        let (fa, fb) = forward_batch(&enc, &refs(&a), &refs(&b)).unwrap();
        let t = batch_targets(&enc, &settings, &fa, &fb).unwrap();
        let obj = batch_objective(&enc, &settings, &fa, &fb, &[0.25; 4], &t).unwrap();
        let (_, _, dz) = losses::neg_cosine_with_grad(fa[0].prediction(), &fb[0].z).unwrap();
        assert!(dz.iter().all(|v| *v == 0.0));
        assert!(obj.value.is_finite());
    }

    #[test]
    fn mismatched_targets_rejected() {
        let (enc, a, b, settings) = setup(LossFamily::NegCosine, false);
        let (fa, fb) = forward_batch(&enc, &refs(&a), &refs(&b)).unwrap();
        assert!(matches!(
            batch_objective(&enc, &settings, &fa, &fb, &[0.25; 4], &FrozenTargets::None),
            Err(TrainerError::InvalidConfig(_))
        ));
        assert!(batch_objective(&enc, &settings, &fa, &fb, &[0.5; 2], &FrozenTargets::None).is_err());
    }

    #[test]
    fn swav_losses_match_kl_rows() {
        let (enc, a, b, settings) = setup(LossFamily::Swav, false);
        let (fa, fb) = forward_batch(&enc, &refs(&a), &refs(&b)).unwrap();
        let t = batch_targets(&enc, &settings, &fa, &fb).unwrap();
        let obj = batch_objective(&enc, &settings, &fa, &fb, &[0.25; 4], &t).unwrap();
        let c = enc.prototypes.as_ref().unwrap();
        let qa = losses::softmax_rows(&prototype_scores(c, &fa).unwrap(), settings.swav_temperature).unwrap();
        let qb = losses::softmax_rows(&prototype_scores(c, &fb).unwrap(), settings.swav_temperature).unwrap();
        let FrozenTargets::Assignments { t_a, t_b } = &t else {
            panic!()
        };
        for i in 0..4 {
            let mut expect = 0.0;
            for p in 0..3 {
                expect += 0.5 * t_b.get(i, p) * (t_b.get(i, p) / qa.get(i, p)).ln();
                expect += 0.5 * t_a.get(i, p) * (t_a.get(i, p) / qb.get(i, p)).ln();
            }
            assert!((obj.losses[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn family_parsing() {
        assert_eq!("info_nce".parse::<LossFamily>().unwrap(), LossFamily::InfoNce);
        assert_eq!("neg-cosine".parse::<LossFamily>().unwrap(), LossFamily::NegCosine);
        assert_eq!("SwAV".parse::<LossFamily>().unwrap(), LossFamily::Swav);
        assert!("triplet".parse::<LossFamily>().is_err());
        for f in [LossFamily::InfoNce, LossFamily::NegCosine, LossFamily::Swav] {
            assert_eq!(f.to_string().parse::<LossFamily>().unwrap(), f);
        }
    }
}

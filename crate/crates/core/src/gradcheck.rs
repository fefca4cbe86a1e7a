//! Central finite-difference checks of tape gradients.
//!
//! A [`GradCase`] is a graph builder plus random inputs. The checker
//! reduces the graph output to a scalar with fixed, index-dependent weights,
//! runs the reverse sweep, and compares every partial derivative with
//! `(f(x + h) − f(x − h)) / 2h` from fresh forward passes.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Episode;
use crate::losses::{ban_loss_on, cross_entropy_on, js_divergence_on, mm_loss_on, mr_loss_on, LossWeights};
use crate::model::{logits_on, HeadKind, ModelConfig, ModelParams};
use crate::rng::Stream;
use crate::{Result, Tape, Tensor, Var};

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

pub type CaseGen = fn(&mut Stream) -> GradCase;

fn probe_weight(i: usize) -> f64 {
    libm::sin(1.3 * i as f64 + 0.7) + 0.25
}

fn scalar_output(tape: &mut Tape, out: Var) -> Result<Var> {
    let v = tape.value(out);
    if v.len() == 1 {
        return Ok(out);
    }
    let w = Tensor::new(v.shape().to_vec(), (0..v.len()).map(probe_weight).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn forward(case: &GradCase, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let s = scalar_output(&mut tape, out)?;
    Ok(tape.value(s).item())
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-4)` over
/// every input element. The floor keeps exactly-zero partials, where the
/// difference quotient is pure rounding noise (around 1e-10), from reading as
/// large relative errors.
pub fn max_relative_error(case: &GradCase, h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let s = scalar_output(&mut tape, out)?;
    let grads = tape.backward(s)?;
    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for (k, &v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(v, &case.inputs[k]);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x0 + h;
            let up = forward(case, &inputs)?;
            inputs[k].data_mut()[i] = x0 - h;
            let down = forward(case, &inputs)?;
            inputs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()).expect("finite")
}

/// Entries in `[-2, 2]` kept at least `margin` away from zero, so kinks at
/// the origin stay outside the difference stencil.
fn away_from_zero(rng: &mut Stream, shape: &[usize], margin: f64) -> Tensor {
    let mut t = uniform(rng, shape, -2.0, 2.0);
    for x in t.data_mut() {
        if x.abs() < margin {
            *x = if *x < 0.0 { -margin } else { margin };
        }
    }
    t
}

fn dims(rng: &mut Stream) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        inputs,
        build: Box::new(build),
    }
}

fn random_targets(rng: &mut Stream, n: usize, c: usize) -> Tensor {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    Tensor::one_hot(&labels, c).expect("labels in range")
}

/// One generator per differentiable tape op.
pub fn op_catalogue() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("add", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0), uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0), uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0), uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.mul(v[0], v[1]))
        }),
        ("mul_scalar", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[], -2.0, 2.0), uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.mul(v[0], v[1]))
        }),
        ("matmul", |r| {
            let (n, k, m) = dims(r);
            case(vec![uniform(r, &[n, k], -2.0, 2.0), uniform(r, &[k, m], -2.0, 2.0)], |t, v| t.matmul(v[0], v[1]))
        }),
        ("add_row", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0), uniform(r, &[m], -2.0, 2.0)], |t, v| t.add_row(v[0], v[1]))
        }),
        ("relu", |r| {
            let (n, m, _) = dims(r);
            case(vec![away_from_zero(r, &[n, m], 1e-3)], |t, v| t.relu(v[0]))
        }),
        ("exp", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.exp(v[0]))
        }),
        ("log", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], 0.1, 2.0)], |t, v| t.log(v[0]))
        }),
        ("tanh", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.tanh(v[0]))
        }),
        ("clamp_min", |r| {
            let (n, m, _) = dims(r);
            case(vec![away_from_zero(r, &[n, m], 1e-3)], |t, v| t.clamp_min(v[0], 0.0))
        }),
        ("sum", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], |t, v| t.sum(v[0]))
        }),
        ("mean", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)
            })
        }),
        ("scale", |r| {
            let (n, m, _) = dims(r);
            let c = r.random_range(-2.0..2.0);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], move |t, v| t.scale(v[0], c))
        }),
        ("add_const", |r| {
            let (n, m, _) = dims(r);
            let c = r.random_range(-2.0..2.0);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], move |t, v| t.add_const(v[0], c))
        }),
        ("concat_cols", |r| {
            let (n, a, b) = dims(r);
            case(vec![uniform(r, &[n, a], -2.0, 2.0), uniform(r, &[n, b], -2.0, 2.0)], |t, v| t.concat_cols(v[0], v[1]))
        }),
        ("concat_rows", |r| {
            let (a, b, m) = dims(r);
            case(vec![uniform(r, &[a, m], -2.0, 2.0), uniform(r, &[b, m], -2.0, 2.0)], |t, v| t.concat_rows(v[0], v[1]))
        }),
        ("slice_rows", |r| {
            let (n, m, _) = dims(r);
            let s = r.random_range(0..n);
            let e = r.random_range(s + 1..=n);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], move |t, v| t.slice_rows(v[0], s, e))
        }),
        ("gather_rows", |r| {
            let (n, m, k) = dims(r);
            let idx: Vec<usize> = (0..k + 1).map(|_| r.random_range(0..n)).collect();
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], move |t, v| t.gather_rows(v[0], &idx))
        }),
        ("reshape", |r| {
            let (n, m, _) = dims(r);
            case(vec![uniform(r, &[n, m], -2.0, 2.0)], move |t, v| t.reshape(v[0], &[m, n]))
        }),
        ("pairwise_sq_dist", |r| {
            let (n, k, m) = dims(r);
            case(vec![uniform(r, &[n, k], -2.0, 2.0), uniform(r, &[m, k], -2.0, 2.0)], |t, v| {
                t.pairwise_sq_dist(v[0], v[1])
            })
        }),
        ("cosine_similarity", |r| {
            let (n, k, m) = dims(r);
            let k = k + 1;
            case(vec![away_from_zero(r, &[n, k], 0.2), away_from_zero(r, &[m, k], 0.2)], |t, v| {
                t.cosine_similarity(v[0], v[1])
            })
        }),
        ("softmax_rows", |r| {
            let (n, m, _) = dims(r);
            let tau = r.random_range(0.5..5.0);
            case(vec![uniform(r, &[n, m + 1], -2.0, 2.0)], move |t, v| t.softmax_rows(v[0], tau))
        }),
    ]
}

fn loss_dims(r: &mut Stream) -> (usize, usize, f64) {
    (r.random_range(1..6), r.random_range(2..6), r.random_range(0.5..5.0))
}

fn random_weights(r: &mut Stream) -> LossWeights {
    LossWeights {
        lambda1: r.random_range(0.1..2.0),
        lambda2: r.random_range(0.1..2.0),
        lambda3: r.random_range(0.1..2.0),
    }
}

/// One generator per loss; inputs are logits, so the checks cover the
/// softmax feeding each loss as well.
pub fn loss_catalogue() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("cross_entropy", |r| {
            let (n, c, _) = loss_dims(r);
            let y = random_targets(r, n, c);
            case(vec![uniform(r, &[n, c], -2.0, 2.0)], move |t, v| {
                let p = t.softmax_rows(v[0], 1.0)?;
                cross_entropy_on(t, p, &y)
            })
        }),
        ("js_divergence", |r| {
            let (n, c, tau) = loss_dims(r);
            case(vec![uniform(r, &[n, c], -2.0, 2.0), uniform(r, &[n, c], -2.0, 2.0)], move |t, v| {
                let p = t.softmax_rows(v[0], tau)?;
                let q = t.softmax_rows(v[1], tau)?;
                js_divergence_on(t, p, q)
            })
        }),
        ("ban_loss", |r| {
            let (n, c, tau) = loss_dims(r);
            let y = random_targets(r, n, c);
            let w = random_weights(r);
            case(vec![uniform(r, &[n, c], -2.0, 2.0), uniform(r, &[n, c], -2.0, 2.0)], move |t, v| {
                ban_loss_on(t, v[0], v[1], &y, &w, tau)
            })
        }),
        ("mr_loss", |r| {
            let (n, c, tau) = loss_dims(r);
            let w = random_weights(r);
            case(vec![uniform(r, &[n, c], -2.0, 2.0), uniform(r, &[n, c], -2.0, 2.0)], move |t, v| {
                mr_loss_on(t, v[0], v[1], &w, tau)
            })
        }),
        ("mm_loss", |r| {
            let (n, c, tau) = loss_dims(r);
            let y = random_targets(r, n, c);
            let w = random_weights(r);
            case(vec![uniform(r, &[n, c], -2.0, 2.0), uniform(r, &[n, c], -2.0, 2.0)], move |t, v| {
                mm_loss_on(t, v[0], v[1], &y, &w, tau)
            })
        }),
    ]
}

fn head_case(r: &mut Stream, head: HeadKind) -> GradCase {
    let (n_way, n_shot, n_query, d) = (r.random_range(2..4), r.random_range(1..3), r.random_range(1..3), 3);
    let cfg = ModelConfig {
        input_dim: d,
        hidden: vec![4],
        feature_dim: 3,
        head,
        relation_hidden: 3,
    };
    let mut params = ModelParams::init(&cfg, r).expect("valid config");
    for t in &mut params.tensors {
        let shape = t.shape().to_vec();
        *t = away_from_zero(r, &shape, 0.05).map(|x| 0.7 * x);
    }
    let support_y: Vec<usize> = (0..n_way).flat_map(|c| vec![c; n_shot]).collect();
    let query_y: Vec<usize> = (0..n_way).flat_map(|c| vec![c; n_query]).collect();
    let episode = Episode {
        support_x: uniform(r, &[support_y.len(), d], -2.0, 2.0),
        query_x: uniform(r, &[query_y.len(), d], -2.0, 2.0),
        support_y,
        query_y,
        class_map: (0..n_way).collect(),
        domain_id: 0,
        support_ids: Vec::new(),
        query_ids: Vec::new(),
    };
    let targets = episode.query_targets();
    case(params.tensors.clone(), move |t, v| {
        let l = logits_on(t, &cfg, v, &episode)?;
        let p = t.softmax_rows(l, 1.0)?;
        cross_entropy_on(t, p, &targets)
    })
}

/// Full model forward passes (encoder plus each head) under cross-entropy,
/// differentiated with respect to every parameter.
pub fn model_catalogue() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("prototypical_model", |r| head_case(r, HeadKind::Prototypical)),
        ("matching_model", |r| head_case(r, HeadKind::Matching)),
        ("relation_model", |r| head_case(r, HeadKind::Relation)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn a_wrong_gradient_is_detected() {
        // exp implemented as a "param" of the wrong derivative: compare the
        // reported error for y = x·x against a builder that detaches one side.
        let c = case(vec![Tensor::vector(vec![1.5, -0.5])], |t, v| {
            let k = t.constant(t.value(v[0]).clone());
            t.mul(v[0], k)
        });
        assert!(max_relative_error(&c, 1e-5).unwrap() > 0.4);
    }

    #[test]
    fn every_catalogue_entry_builds() {
        let mut r = rng::stream(0, "gc");
        for (name, g) in op_catalogue().into_iter().chain(loss_catalogue()).chain(model_catalogue()) {
            let c = g(&mut r);
            let e = max_relative_error(&c, 1e-5).unwrap();
            assert!(e <= 1e-4, "{name}: {e}");
        }
    }
}

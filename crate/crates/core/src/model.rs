//! Feature encoder and metric-based few-shot heads.
//!
//! The encoder is a fully-connected ReLU network. A head turns query and
//! support features into one logit per (query, class) pair:
//!
//! - Prototypical: `−‖f_q − μ_c‖²` against class-mean support features.
//! - Matching: `log Σ_{s ∈ c} softmax_s(cos(f_q, f_s))`, attention mass per class.
//! - Relation: a small comparator MLP scoring `[f_q | μ_c]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::rng::Stream;
use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Prototypical,
    Matching,
    Relation,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Prototypical, HeadKind::Matching, HeadKind::Relation];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Prototypical => "prototypical",
            HeadKind::Matching => "matching",
            HeadKind::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head: HeadKind,
    /// Width of the relation comparator's hidden layer.
    pub relation_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 32,
            head: HeadKind::Prototypical,
            relation_hidden: 16,
        }
    }
}

impl ModelConfig {
    /// Shapes of every parameter tensor, encoder layers first.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &w in self.hidden.iter().chain(core::iter::once(&self.feature_dim)) {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![w]);
            fan_in = w;
        }
        if self.head == HeadKind::Relation {
            shapes.push(vec![2 * self.feature_dim, self.relation_hidden]);
            shapes.push(vec![self.relation_hidden]);
            shapes.push(vec![self.relation_hidden, 1]);
            shapes.push(vec![1]);
        }
        shapes
    }

    fn encoder_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.head == HeadKind::Relation && self.relation_hidden == 0 {
            return Err(Error::invalid("relation_hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(config: &ModelConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut fan_in = config.input_dim;
        for shape in shapes {
            if shape.len() == 2 {
                fan_in = shape[0];
            }
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
            tensors.push(Tensor::from_parts(shape, data));
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Checks tensor shapes against the config.
    pub fn from_parts(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(Error::invalid("parameter shapes do not match the model config"));
        }
        for t in &tensors {
            t.check_finite("model_params")?;
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Root-mean-square over every parameter.
    pub fn weight_rms(&self) -> f64 {
        let ss: f64 = self.tensors.iter().map(Tensor::sq_norm).sum();
        libm::sqrt(ss / self.num_params() as f64)
    }

    /// Copy with i.i.d. `N(0, std²)` noise added to every parameter.
    pub fn perturbed(&self, std: f64, rng: &mut Stream) -> Self {
        let mut out = self.clone();
        if std != 0.0 {
            for t in &mut out.tensors {
                for x in t.data_mut() {
                    *x += std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        out
    }

    /// Records every tensor on `tape`, as trainable params or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Encoder forward pass without a persistent graph.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = encode_on(&mut tape, &self.config, &vars, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Query logits (`N_w·N_q × N_w`) for an episode.
    pub fn logits(&self, episode: &Episode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let l = logits_on(&mut tape, &self.config, &vars, episode)?;
        Ok(tape.value(l).clone())
    }
}

/// Encoder forward pass on a tape. `vars` are the bound model parameters.
pub fn encode_on(tape: &mut Tape, config: &ModelConfig, vars: &[Var], x: Var) -> Result<Var> {
    let xt = tape.value(x);
    if xt.shape().len() != 2 || xt.cols() != config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: xt.shape().to_vec(),
            rhs: vec![0, config.input_dim],
        });
    }
    let layers = config.encoder_layers();
    let mut h = x;
    for l in 0..layers {
        let z = tape.matmul(h, vars[2 * l])?;
        h = tape.add_row(z, vars[2 * l + 1])?;
        if l + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Averaging matrix (`n_way × n_support`) mapping support rows to class means.
fn class_mean_matrix(support_y: &[usize], n_way: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; n_way];
    for &y in support_y {
        if y >= n_way {
            return Err(Error::invalid("support label out of range"));
        }
        counts[y] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::invalid("every class needs at least one support sample"));
    }
    let n = support_y.len();
    let mut a = Tensor::zeros(&[n_way, n]);
    for (j, &y) in support_y.iter().enumerate() {
        a.data_mut()[y * n + j] = 1.0 / counts[y] as f64;
    }
    Ok(a)
}

/// Head logits for `episode` on a tape.
pub fn logits_on(tape: &mut Tape, config: &ModelConfig, vars: &[Var], episode: &Episode) -> Result<Var> {
    let n_way = episode.n_way();
    let ns = episode.support_x.rows();
    let nq = episode.query_x.rows();
    let x = Tensor::vstack(&[&episode.support_x, &episode.query_x])?;
    let xv = tape.constant(x);
    let f = encode_on(tape, config, vars, xv)?;
    let fs = tape.slice_rows(f, 0, ns)?;
    let fq = tape.slice_rows(f, ns, ns + nq)?;

    match config.head {
        HeadKind::Prototypical => {
            let a = tape.constant(class_mean_matrix(&episode.support_y, n_way)?);
            let mu = tape.matmul(a, fs)?;
            let d = tape.pairwise_sq_dist(fq, mu)?;
            tape.scale(d, -1.0)
        }
        HeadKind::Matching => {
            class_mean_matrix(&episode.support_y, n_way)?;
            let cos = tape.cosine_similarity(fq, fs)?;
            let attn = tape.softmax_rows(cos, 1.0)?;
            let onehot = tape.constant(Tensor::one_hot(&episode.support_y, n_way)?);
            let mass = tape.matmul(attn, onehot)?;
            tape.log(mass)
        }
        HeadKind::Relation => {
            let base = 2 * config.encoder_layers();
            let a = tape.constant(class_mean_matrix(&episode.support_y, n_way)?);
            let mu = tape.matmul(a, fs)?;
            let qi: Vec<usize> = (0..nq).flat_map(|q| core::iter::repeat_n(q, n_way)).collect();
            let ci: Vec<usize> = (0..nq).flat_map(|_| 0..n_way).collect();
            let fq_rep = tape.gather_rows(fq, &qi)?;
            let mu_rep = tape.gather_rows(mu, &ci)?;
            let pair = tape.concat_cols(fq_rep, mu_rep)?;
            let h = tape.matmul(pair, vars[base])?;
            let h = tape.add_row(h, vars[base + 1])?;
            let h = tape.relu(h)?;
            let s = tape.matmul(h, vars[base + 2])?;
            let s = tape.add_row(s, vars[base + 3])?;
            tape.reshape(s, &[nq, n_way])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_universe, Split, UniverseConfig};
    use crate::rng;

    fn cfg(head: HeadKind) -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            hidden: vec![6],
            feature_dim: 3,
            head,
            relation_hidden: 5,
        }
    }

    fn episode_from(support: &[Vec<f64>], support_y: Vec<usize>, query: &[Vec<f64>], query_y: Vec<usize>, n_way: usize) -> Episode {
        Episode {
            support_x: Tensor::from_rows(support).unwrap(),
            support_y,
            query_x: Tensor::from_rows(query).unwrap(),
            query_y,
            class_map: (0..n_way).collect(),
            domain_id: 0,
            support_ids: vec![],
            query_ids: vec![],
        }
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut p = ModelParams::init(&cfg(HeadKind::Prototypical), &mut rng::stream(0, "m")).unwrap();
        for t in &mut p.tensors {
            t.data_mut().fill(0.0);
        }
        let f = p.encode(&Tensor::filled(&[3, 4], 1.5)).unwrap();
        assert_eq!(f.shape(), &[3, 3]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_identical_features() {
        let p = ModelParams::init(&cfg(HeadKind::Prototypical), &mut rng::stream(1, "m")).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let f = p.encode(&x).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = ModelParams::init(&cfg(HeadKind::Prototypical), &mut rng::stream(1, "m")).unwrap();
        assert!(matches!(p.encode(&Tensor::zeros(&[2, 5])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn prototypical_query_on_support_point() {
        // Identity-like encoder: 4 → 4 → 4 with identity weights keeps inputs
        // non-negative so ReLU is inactive.
        let mut c = cfg(HeadKind::Prototypical);
        c.hidden = vec![4];
        c.feature_dim = 4;
        let p = ModelParams::from_parts(
            c,
            vec![Tensor::identity(4), Tensor::zeros(&[4]), Tensor::identity(4), Tensor::zeros(&[4])],
        )
        .unwrap();
        let support = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 1.0]];
        let ep = episode_from(&support, vec![0, 1, 2], &[support[1].clone()], vec![1], 3);
        let l = p.logits(&ep).unwrap();
        assert_eq!(l.at(0, 1), 0.0);
        assert!(l.at(0, 0) < 0.0 && l.at(0, 2) < 0.0);
    }

    #[test]
    fn prototypical_symmetric_support_gives_equal_logits() {
        let mut c = cfg(HeadKind::Prototypical);
        c.hidden = vec![4];
        c.feature_dim = 4;
        let p = ModelParams::from_parts(
            c,
            vec![Tensor::identity(4), Tensor::zeros(&[4]), Tensor::identity(4), Tensor::zeros(&[4])],
        )
        .unwrap();
        let support = vec![vec![2.0, 1.0, 1.0, 1.0], vec![0.0, 1.0, 1.0, 1.0]];
        let ep = episode_from(&support, vec![0, 1], &[vec![1.0, 1.0, 1.0, 1.0]], vec![0], 2);
        let l = p.logits(&ep).unwrap();
        assert_eq!(l.at(0, 0), l.at(0, 1));
    }

    #[test]
    fn matching_signals_degenerate_features() {
        let mut p = ModelParams::init(&cfg(HeadKind::Matching), &mut rng::stream(2, "m")).unwrap();
        for t in &mut p.tensors {
            t.data_mut().fill(0.0);
        }
        let ep = episode_from(&[vec![1.0; 4], vec![2.0; 4]], vec![0, 1], &[vec![1.0; 4]], vec![0], 2);
        assert!(matches!(p.logits(&ep), Err(Error::Degenerate(_))));
    }

    #[test]
    fn all_heads_finite_on_sampled_episodes() {
        let u = generate_universe(&UniverseConfig { dim: 4, signal_dim: 2, samples_per_class: 40, ..Default::default() }).unwrap();
        let mut r = rng::stream(5, "ep");
        for head in HeadKind::ALL {
            let p = ModelParams::init(&cfg(head), &mut rng::stream(3, "m")).unwrap();
            for _ in 0..10 {
                let ep = u.sample_episode(1, Split::Base, 5, 2, 3, &mut r).unwrap();
                let l = p.logits(&ep).unwrap();
                assert_eq!(l.shape(), &[15, 5]);
                assert!(l.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn relation_param_layout() {
        let c = cfg(HeadKind::Relation);
        let shapes = c.param_shapes();
        assert_eq!(shapes.len(), 8);
        assert_eq!(shapes[4], vec![6, 5]);
        assert_eq!(shapes[6], vec![5, 1]);
    }
}

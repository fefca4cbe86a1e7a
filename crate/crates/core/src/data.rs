//! Procedural multi-domain classification universe and episodic sampler.
//!
//! Every class is a latent Gaussian prototype. A domain owns a disjoint set
//! of classes and maps latent samples into input space with its own affine
//! transform followed by a smooth `h + w·tanh(h)` warp. The affine maps of
//! all domains are perturbations of one shared mixing matrix, so structure
//! learned on one domain partly transfers to another while the shift stays
//! measurable.
//!
//! Latent dimensions split into a *signal* block, where the class
//! prototypes live, and a *nuisance* block that only carries within-class
//! noise. Noise is heteroscedastic: each class draws its own per-dimension
//! scales.
//!
//! Samples are not stored. Sample `i` of global class `g` is regenerated on
//! demand from a counter-based stream keyed by `(seed, g, i)`, so a sample id
//! is just `(g, i)` and any two draws of the same id are bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub classes_per_domain: usize,
    pub dim: usize,
    /// Base / valid / novel fractions of each domain's classes.
    pub split_fractions: [f64; 3],
    /// Latent dimensions that carry class identity.
    pub signal_dim: usize,
    pub prototype_scale: f64,
    /// Relative within-class spread on signal dimensions.
    pub signal_spread: f64,
    /// Relative within-class spread on nuisance dimensions.
    pub nuisance_spread: f64,
    /// Size of the per-domain perturbation of the shared mixing matrix.
    pub domain_shift: f64,
    pub bias_scale: f64,
    pub warp_max: f64,
    /// Per-domain noise std is drawn uniformly from this range.
    pub noise_std_range: [f64; 2],
    pub samples_per_class: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            seed: 0,
            n_domains: 4,
            classes_per_domain: 20,
            dim: 32,
            split_fractions: [0.5, 0.25, 0.25],
            signal_dim: 8,
            prototype_scale: 1.0,
            signal_spread: 0.6,
            nuisance_spread: 1.5,
            domain_shift: 0.5,
            bias_scale: 0.5,
            warp_max: 0.5,
            noise_std_range: [0.8, 1.2],
            samples_per_class: 600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Valid,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// `dim × dim` mixing matrix.
    pub affine: Tensor,
    pub bias: Vec<f64>,
    pub warp_strength: f64,
    pub noise_std: f64,
}

impl DomainSpec {
    /// Maps a latent vector into this domain's input space.
    pub fn render(&self, latent: &[f64]) -> Vec<f64> {
        let d = self.bias.len();
        let mut out = self.bias.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.affine.data()[i * d..(i + 1) * d];
            *o += row.iter().zip(latent).map(|(a, z)| a * z).sum::<f64>();
        }
        if self.warp_strength != 0.0 {
            for o in &mut out {
                *o += self.warp_strength * libm::tanh(*o);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGenerator {
    pub global_id: usize,
    pub prototype: Vec<f64>,
    /// Per-dimension within-class scale (multiplied by the domain noise std).
    pub scales: Vec<f64>,
}

impl ClassGenerator {
    pub fn latent(&self, noise_std: f64, eps: &[f64]) -> Vec<f64> {
        self.prototype
            .iter()
            .zip(&self.scales)
            .zip(eps)
            .map(|((p, s), e)| p + noise_std * s * e)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub valid: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ClassSplit {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base,
            Split::Valid => &self.valid,
            Split::Novel => &self.novel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub spec: DomainSpec,
    pub classes: Vec<ClassGenerator>,
    pub split: ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub domains: Vec<Domain>,
}

/// Identity of one raw sample: global class id and index into its pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub class: usize,
    pub index: usize,
}

/// One N-way K-shot task with pseudo-labels `0..n_way`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// Pseudo-label → global class id.
    pub class_map: Vec<usize>,
    pub domain_id: usize,
    pub support_ids: Vec<SampleId>,
    pub query_ids: Vec<SampleId>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    /// One-hot query targets (`N_w·N_q × N_w`).
    pub fn query_targets(&self) -> Tensor {
        Tensor::one_hot(&self.query_y, self.n_way()).expect("labels in range")
    }
}

fn gaussian_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn split_sizes(total: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::invalid("split fractions must be non-negative"));
    }
    let s: f64 = fractions.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {s}, expected 1")));
    }
    let base = libm::round(fractions[0] * total as f64) as usize;
    let valid = libm::round(fractions[1] * total as f64) as usize;
    if base + valid > total {
        return Err(Error::invalid("split fractions overflow the class count"));
    }
    let sizes = [base, valid, total - base - valid];
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::InsufficientClasses {
            needed: 3,
            available: total,
        });
    }
    Ok(sizes)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(vec![r, c], data)
}

/// Generates the full universe. Identical configs give identical universes.
pub fn generate_universe(config: &UniverseConfig) -> Result<Universe> {
    let c = config;
    if c.n_domains < 2 {
        return Err(Error::invalid("a universe needs at least two domains"));
    }
    if c.dim == 0 || c.signal_dim == 0 || c.signal_dim > c.dim {
        return Err(Error::invalid("signal_dim must be in 1..=dim"));
    }
    if c.samples_per_class < 2 {
        return Err(Error::invalid("samples_per_class must be at least 2"));
    }
    if c.noise_std_range[0] < 0.0 || c.noise_std_range[1] < c.noise_std_range[0] {
        return Err(Error::invalid("noise_std_range must be an ordered non-negative pair"));
    }
    if c.warp_max < 0.0 || c.domain_shift < 0.0 {
        return Err(Error::invalid("warp_max and domain_shift must be non-negative"));
    }
    let sizes = split_sizes(c.classes_per_domain, c.split_fractions)?;
    let d = c.dim;

    let mut shared_rng = rng::stream(c.seed, "universe/shared-mixing");
    let g = DMatrix::from_row_slice(d, d, &gaussian_vec(&mut shared_rng, d * d));
    let shared = g.qr().q();

    let mut domains = Vec::with_capacity(c.n_domains);
    for dom in 0..c.n_domains {
        let mut r = rng::indexed_stream(c.seed, "universe/domain", dom as u64);
        let scale = c.domain_shift / libm::sqrt(d as f64);
        let affine = loop {
            let pert = DMatrix::from_row_slice(d, d, &gaussian_vec(&mut r, d * d));
            let a = &shared + pert * scale;
            if condition_number(&a) <= 100.0 {
                break a;
            }
        };
        let bias: Vec<f64> = gaussian_vec(&mut r, d).iter().map(|b| b * c.bias_scale).collect();
        let warp_strength = r.random::<f64>() * c.warp_max;
        let noise_std = c.noise_std_range[0] + r.random::<f64>() * (c.noise_std_range[1] - c.noise_std_range[0]);
        let spec = DomainSpec {
            domain_id: dom,
            affine: to_tensor(&affine),
            bias,
            warp_strength,
            noise_std,
        };

        let mut classes = Vec::with_capacity(c.classes_per_domain);
        for k in 0..c.classes_per_domain {
            let global_id = dom * c.classes_per_domain + k;
            let mut cr = rng::indexed_stream(c.seed, "universe/class", global_id as u64);
            let mut prototype = vec![0.0; d];
            for p in prototype.iter_mut().take(c.signal_dim) {
                *p = cr.sample::<f64, _>(StandardNormal) * c.prototype_scale;
            }
            let scales = (0..d)
                .map(|j| {
                    let rel = if j < c.signal_dim { c.signal_spread } else { c.nuisance_spread };
                    rel * (0.5 + cr.random::<f64>())
                })
                .collect();
            classes.push(ClassGenerator {
                global_id,
                prototype,
                scales,
            });
        }
        let first = dom * c.classes_per_domain;
        let split = ClassSplit {
            base: (first..first + sizes[0]).collect(),
            valid: (first + sizes[0]..first + sizes[0] + sizes[1]).collect(),
            novel: (first + sizes[0] + sizes[1]..first + c.classes_per_domain).collect(),
        };
        domains.push(Domain { spec, classes, split });
    }
    Ok(Universe {
        config: c.clone(),
        domains,
    })
}

impl Universe {
    pub fn domain(&self, id: usize) -> Result<&Domain> {
        self.domains.get(id).ok_or(Error::UnknownDomain(id))
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        (0..self.domains.len()).collect()
    }

    fn locate(&self, global_class: usize) -> Result<(&Domain, &ClassGenerator)> {
        let per = self.config.classes_per_domain;
        let dom = self.domain(global_class / per)?;
        Ok((dom, &dom.classes[global_class % per]))
    }

    /// Regenerates a raw sample from its id.
    pub fn sample(&self, id: SampleId) -> Result<Vec<f64>> {
        if id.index >= self.config.samples_per_class {
            return Err(Error::invalid("sample index beyond the class pool"));
        }
        let (dom, class) = self.locate(id.class)?;
        let key = (id.class * self.config.samples_per_class + id.index) as u64;
        let mut r = rng::indexed_stream(self.config.seed, "universe/sample", key);
        let eps = gaussian_vec(&mut r, self.config.dim);
        Ok(dom.spec.render(&class.latent(dom.spec.noise_std, &eps)))
    }

    fn matrix(&self, ids: &[SampleId]) -> Result<Tensor> {
        let d = self.config.dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend(self.sample(id)?);
        }
        Ok(Tensor::from_parts(vec![ids.len(), d], data))
    }

    /// Samples one episode from `split` of `domain_id`.
    pub fn sample_episode(
        &self,
        domain_id: usize,
        split: Split,
        n_way: usize,
        n_shot: usize,
        n_query: usize,
        rng: &mut Stream,
    ) -> Result<Episode> {
        if n_way < 1 || n_shot < 1 || n_query < 1 {
            return Err(Error::invalid("n_way, n_shot and n_query must be at least 1"));
        }
        let pool = self.config.samples_per_class;
        if n_shot + n_query > pool {
            return Err(Error::invalid("n_shot + n_query exceeds samples_per_class"));
        }
        let dom = self.domain(domain_id)?;
        let candidates = dom.split.classes(split);
        if candidates.len() < n_way {
            return Err(Error::InsufficientClasses {
                needed: n_way,
                available: candidates.len(),
            });
        }
        let mut order = candidates.to_vec();
        let (chosen, _) = order.partial_shuffle(rng, n_way);
        let class_map = chosen.to_vec();

        let mut support_ids = Vec::with_capacity(n_way * n_shot);
        let mut query_ids = Vec::with_capacity(n_way * n_query);
        let mut support_y = Vec::with_capacity(n_way * n_shot);
        let mut query_y = Vec::with_capacity(n_way * n_query);
        for (label, &class) in class_map.iter().enumerate() {
            let mut picks = rand::seq::index::sample(rng, pool, n_shot + n_query).into_vec();
            picks.shuffle(rng);
            for &i in &picks[..n_shot] {
                support_ids.push(SampleId { class, index: i });
                support_y.push(label);
            }
            for &i in &picks[n_shot..] {
                query_ids.push(SampleId { class, index: i });
                query_y.push(label);
            }
        }
        Ok(Episode {
            support_x: self.matrix(&support_ids)?,
            support_y,
            query_x: self.matrix(&query_ids)?,
            query_y,
            class_map,
            domain_id,
            support_ids,
            query_ids,
        })
    }

    /// Seen domains and the held-out unseen domain.
    pub fn leave_one_out(&self, held_out: usize) -> Result<(Vec<usize>, usize)> {
        if self.domains.len() < 2 {
            return Err(Error::invalid("leave-one-out needs at least two domains"));
        }
        self.domain(held_out)?;
        let seen = self.domain_ids().into_iter().filter(|&d| d != held_out).collect();
        Ok((seen, held_out))
    }
}

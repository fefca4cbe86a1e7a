//! Supervised encoder pretraining on the pooled base classes.

use alloc::vec::Vec;

use rand::Rng;

use super::config::TrainConfig;
use crate::data::{SampleId, Split, Universe};
use crate::losses::cross_entropy_on;
use crate::model::{encode_on, ModelParams};
use crate::optim::Adam;
use crate::rng;
use crate::{Error, Result, Tape, Tensor};

/// Trains the encoder with a linear softmax classifier over every base class
/// of `domains` and returns a model whose encoder carries the result (head
/// parameters keep their fresh initialization).
pub fn pretrain_encoder(universe: &Universe, domains: &[usize], cfg: &TrainConfig) -> Result<ModelParams> {
    let classes: Vec<usize> = domains
        .iter()
        .map(|&d| universe.domain(d).map(|dom| dom.split.classes(Split::Base).to_vec()))
        .collect::<Result<Vec<_>>>()?
        .concat();
    if classes.len() < 2 {
        return Err(Error::InsufficientClasses { needed: 2, available: classes.len() });
    }
    let mut model = ModelParams::init(&cfg.model, &mut rng::stream(cfg.seed, "pretrain/init"))?;
    let k = classes.len();
    let m = cfg.model.feature_dim;
    let mut init_rng = rng::stream(cfg.seed, "pretrain/classifier");
    let bound = 1.0 / libm::sqrt(m as f64);
    let w = Tensor::new(
        alloc::vec![m, k],
        (0..m * k).map(|_| (init_rng.random::<f64>() * 2.0 - 1.0) * bound).collect(),
    )?;
    let mut params: Vec<Tensor> = model.tensors.clone();
    params.push(w);
    params.push(Tensor::zeros(&[k]));
    let mut opt = Adam::new(cfg.student_lr, &params);
    let mut batch_rng = rng::stream(cfg.seed, "pretrain/batches");
    let pool = universe.config.samples_per_class;
    let n_model = model.tensors.len();
    for _ in 0..cfg.pretrain_epochs {
        for _ in 0..cfg.tasks_per_epoch {
            let mut x = Vec::with_capacity(cfg.pretrain_batch * universe.config.dim);
            let mut y = Vec::with_capacity(cfg.pretrain_batch);
            for _ in 0..cfg.pretrain_batch {
                let label = batch_rng.random_range(0..k);
                let index = batch_rng.random_range(0..pool);
                x.extend(universe.sample(SampleId { class: classes[label], index })?);
                y.push(label);
            }
            let mut tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
            let xv = tape.constant(Tensor::new(alloc::vec![y.len(), universe.config.dim], x)?);
            let f = encode_on(&mut tape, &cfg.model, &vars[..n_model], xv)?;
            let z = tape.matmul(f, vars[n_model])?;
            let z = tape.add_row(z, vars[n_model + 1])?;
            let p = tape.softmax_rows(z, 1.0)?;
            let loss = cross_entropy_on(&mut tape, p, &Tensor::one_hot(&y, k)?)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().zip(&params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
            opt.step(&mut params, &g)?;
        }
    }
    params.truncate(n_model);
    model.tensors = params;
    Ok(model)
}

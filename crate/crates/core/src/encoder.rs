//! Invariant message-passing encoder, Siamese projection MLP and the
//! split-head posterior predictor.
//!
//! Messages depend on coordinates only through pairwise distances, so the
//! pooled embedding is unchanged by rotations, translations and node
//! relabelings. Each interaction block is a continuous-filter convolution:
//!
//! ```text
//! m_ij = filter(rbf(d_ij)) * (W_in h_j)
//! h_i <- layer_norm(h_i + W_out ssp(sum_j m_ij))
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{element_index, RadialGraph, TaskKind};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Activation, Checkpoint, ParamId, ParamStore, Tape, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("validation: {0}")]
    Validation(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub radial_num_basis: usize,
    pub radial_num_hidden: usize,
    pub radial_num_layers: usize,
    pub cutoff: f64,
    pub dropout: f64,
    pub n_element_types: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            num_blocks: 4,
            radial_num_basis: 16,
            radial_num_hidden: 16,
            radial_num_layers: 2,
            cutoff: 4.0,
            dropout: 0.2,
            n_element_types: 8,
        }
    }
}

impl EncoderConfig {
    pub fn with_hidden_dim(d: usize) -> Self {
        Self {
            hidden_dim: d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.hidden_dim,
            self.num_blocks,
            self.radial_num_basis,
            self.radial_num_hidden,
            self.radial_num_layers,
            self.n_element_types,
        ];
        if counts.contains(&0) {
            return Err(ModelError::Validation("encoder sizes must be >= 1".into()));
        }
        if self.radial_num_basis < 2 {
            return Err(ModelError::Validation("radial basis needs at least 2 functions".into()));
        }
        if !(self.cutoff > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Validation("cutoff must be > 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mu: f64,
    pub sigma: f64,
}

/// Training-split label mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub mu_t: f64,
    pub sigma_t: f64,
}

impl PriorStats {
    /// Population statistics; a zero spread falls back to 1.
    pub fn from_labels(labels: &[f64]) -> Self {
        let n = labels.len().max(1) as f64;
        let mu_t = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mu_t).powi(2)).sum::<f64>() / n;
        let sigma_t = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mu_t, sigma_t }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    filter: Vec<Dense>,
    w_in: Dense,
    w_out: Dense,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct Head {
    l1: Dense,
    n1: Norm,
    l2: Dense,
    n2: Norm,
    l3: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    blocks: Vec<Block>,
    readout: Dense,
    proj1: Dense,
    proj_norm: Norm,
    proj2: Dense,
    mu_head: Head,
    sigma_head: Head,
}

/// Header stored alongside parameters in a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub encoder: EncoderConfig,
    pub task: TaskKind,
    pub prior: Option<PriorStats>,
}

/// Encoder, projection MLP and posterior heads with their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EncoderConfig,
    pub task: TaskKind,
    pub prior: Option<PriorStats>,
    pub params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Dense> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        let w = self.store.register(format!("{name}.w"), vec![fan_in, fan_out], w)?;
        let b = if bias {
            let b: Vec<f64> = (0..fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
            Some(self.store.register(format!("{name}.b"), vec![fan_out], b)?)
        } else {
            None
        };
        Ok(Dense { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.store.register(format!("{name}.gain"), vec![d], vec![1.0; d])?,
            bias: self.store.register(format!("{name}.bias"), vec![d], vec![0.0; d])?,
        })
    }

    fn head(&mut self, name: &str, d: usize) -> Result<Head> {
        Ok(Head {
            l1: self.dense(&format!("{name}.l1"), d, 2 * d, true)?,
            n1: self.norm(&format!("{name}.norm1"), 2 * d)?,
            l2: self.dense(&format!("{name}.l2"), 2 * d, d, true)?,
            n2: self.norm(&format!("{name}.norm2"), d)?,
            l3: self.dense(&format!("{name}.l3"), d, 1, true)?,
        })
    }
}

/// Per-pass forward options. Dropout is active only when an RNG is given.
pub struct Pass<'r> {
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl Pass<'_> {
    pub fn eval() -> Pass<'static> {
        Pass { dropout_rng: None }
    }
}

impl<'r> Pass<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Pass { dropout_rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }
}

/// Outputs of one graph through the full model.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub zhat: Var,
    pub z: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Gaussian radial basis: `radial_num_basis` bumps with centers evenly
/// spaced on `[0, cutoff]` and width equal to the spacing.
pub fn radial_basis(distance: f64, cutoff: f64, n_basis: usize) -> Result<Vec<f64>> {
    if !(0.0..=cutoff).contains(&distance) {
        return Err(ModelError::Contract(format!(
            "distance {distance} outside [0, {cutoff}]"
        )));
    }
    let spacing = cutoff / (n_basis - 1) as f64;
    let gamma = 1.0 / (spacing * spacing);
    Ok((0..n_basis)
        .map(|k| {
            let c = k as f64 * spacing;
            (-gamma * (distance - c).powi(2)).exp()
        })
        .collect())
}

/// Analytic derivative of [`radial_basis`] with respect to distance.
pub fn radial_basis_derivative(distance: f64, cutoff: f64, n_basis: usize) -> Vec<f64> {
    let spacing = cutoff / (n_basis - 1) as f64;
    let gamma = 1.0 / (spacing * spacing);
    (0..n_basis)
        .map(|k| {
            let c = k as f64 * spacing;
            -2.0 * gamma * (distance - c) * (-gamma * (distance - c).powi(2)).exp()
        })
        .collect()
}

fn dropout(tape: &mut Tape, x: Var, p: f64, pass: &mut Pass<'_>) -> Result<Var> {
    let Some(rng) = pass.dropout_rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let n = tape.tensor(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Ok(tape.mul_const(x, mask)?)
}

impl Model {
    pub fn new(config: EncoderConfig, task: TaskKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let emb: Vec<f64> = (0..config.n_element_types * d).map(|_| emb_dist.sample(&mut rng)).collect();
        let embedding = store.register("encoder.embedding", vec![config.n_element_types, d], emb)?;
        let mut init = Init { store: &mut store, rng };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for k in 0..config.num_blocks {
            let mut filter = Vec::new();
            let mut fan_in = config.radial_num_basis;
            for l in 0..config.radial_num_layers {
                let out = if l + 1 == config.radial_num_layers { d } else { config.radial_num_hidden };
                filter.push(init.dense(&format!("encoder.block{k}.radial.l{l}"), fan_in, out, true)?);
                fan_in = out;
            }
            blocks.push(Block {
                filter,
                w_in: init.dense(&format!("encoder.block{k}.w_in"), d, d, false)?,
                w_out: init.dense(&format!("encoder.block{k}.w_out"), d, d, true)?,
                norm: init.norm(&format!("encoder.block{k}.norm"), d)?,
            });
        }
        let readout = init.dense("encoder.readout", d, d, true)?;
        let proj1 = init.dense("projection.l1", d, 2 * d, true)?;
        let proj_norm = init.norm("projection.norm", 2 * d)?;
        let proj2 = init.dense("projection.l2", 2 * d, d, true)?;
        let mu_head = init.head("head.mu", d)?;
        let sigma_head = init.head("head.sigma", d)?;
        Ok(Self {
            config,
            task,
            prior: None,
            params: store,
            layout: Layout {
                embedding,
                blocks,
                readout,
                proj1,
                proj_norm,
                proj2,
                mu_head,
                sigma_head,
            },
        })
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            encoder: self.config,
            task: self.task,
            prior: self.prior,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: serde_json::to_string(&self.header()).expect("header serializes"),
            entries: self.params.to_entries(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: ModelHeader = serde_json::from_str(&ckpt.header)
            .map_err(|e| ModelError::Validation(format!("checkpoint header: {e}")))?;
        let mut model = Model::new(header.encoder, header.task, 0)?;
        model.prior = header.prior;
        model.params.load_from(&ckpt.entries)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        write_checkpoint(w, &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(&ckpt)
    }

    fn dense(&self, tape: &mut Tape, layer: Dense, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, layer.w);
        let y = tape.matmul(x, w)?;
        Ok(match layer.b {
            Some(b) => {
                let b = tape.param(&self.params, b);
                tape.add_bias(y, b)?
            }
            None => y,
        })
    }

    fn norm(&self, tape: &mut Tape, norm: Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.params, norm.gain);
        let b = tape.param(&self.params, norm.bias);
        Ok(tape.layer_norm(x, g, b)?)
    }

    /// Element-embedding lookup, one row per node.
    pub fn embed_nodes(&self, tape: &mut Tape, graph: &RadialGraph) -> Result<Var> {
        let idx = graph
            .node_types
            .iter()
            .map(|&z| element_index(z).ok_or_else(|| ModelError::Validation(format!("unknown element {z}"))))
            .collect::<Result<Vec<_>>>()?;
        let table = tape.param(&self.params, self.layout.embedding);
        Ok(tape.gather_rows(table, &idx)?)
    }

    /// Radial-basis expansion of every edge distance, `E x n_basis`.
    pub fn edge_basis(&self, graph: &RadialGraph) -> Result<Vec<f64>> {
        let k = self.config.radial_num_basis;
        let mut out = Vec::with_capacity(graph.edges.len() * k);
        for e in &graph.edges {
            out.extend(radial_basis(e.distance, self.config.cutoff, k)?);
        }
        Ok(out)
    }

    pub fn interaction_block(
        &self,
        tape: &mut Tape,
        block: usize,
        h: Var,
        graph: &RadialGraph,
        basis: Var,
    ) -> Result<Var> {
        let b = &self.layout.blocks[block];
        let mut f = basis;
        for (l, layer) in b.filter.iter().enumerate() {
            f = self.dense(tape, *layer, f)?;
            if l + 1 < b.filter.len() {
                f = tape.activation(Activation::ShiftedSoftplus, f);
            }
        }
        let x = self.dense(tape, b.w_in, h)?;
        let xj = tape.gather_rows(x, &graph.sources())?;
        let msg = tape.mul(f, xj)?;
        let agg = tape.scatter_add_rows(msg, &graph.targets(), graph.n_nodes)?;
        let act = tape.activation(Activation::ShiftedSoftplus, agg);
        let upd = self.dense(tape, b.w_out, act)?;
        let res = tape.add(h, upd)?;
        self.norm(tape, b.norm, res)
    }

    /// Pooled molecule embedding `zhat`, shape `1 x d`.
    pub fn encode(&self, tape: &mut Tape, graph: &RadialGraph) -> Result<Var> {
        if graph.n_nodes == 0 {
            return Err(ModelError::Contract("graph has no nodes".into()));
        }
        let basis = tape.constant(
            vec![graph.edges.len(), self.config.radial_num_basis],
            self.edge_basis(graph)?,
        )?;
        let mut h = self.embed_nodes(tape, graph)?;
        for k in 0..self.layout.blocks.len() {
            h = self.interaction_block(tape, k, h, graph, basis)?;
        }
        let pooled = tape.mean_rows(h)?;
        self.dense(tape, self.layout.readout, pooled)
    }

    /// Siamese projection `z = h(zhat)`.
    pub fn project(&self, tape: &mut Tape, zhat: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let l = &self.layout;
        let x = self.dense(tape, l.proj1, zhat)?;
        let x = tape.activation(Activation::ShiftedSoftplus, x);
        let x = self.norm(tape, l.proj_norm, x)?;
        let x = dropout(tape, x, self.config.dropout, pass)?;
        let x = self.dense(tape, l.proj2, x)?;
        Ok(tape.activation(Activation::ShiftedSoftplus, x))
    }

    fn head(&self, tape: &mut Tape, head: &Head, zhat: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let p = self.config.dropout;
        let x = self.dense(tape, head.l1, zhat)?;
        let x = tape.activation(Activation::ShiftedSoftplus, x);
        let x = self.norm(tape, head.n1, x)?;
        let x = dropout(tape, x, p, pass)?;
        let x = self.dense(tape, head.l2, x)?;
        let x = tape.activation(Activation::ShiftedSoftplus, x);
        let x = self.norm(tape, head.n2, x)?;
        let x = dropout(tape, x, p, pass)?;
        let x = self.dense(tape, head.l3, x)?;
        Ok(tape.reshape(x, vec![1])?)
    }

    /// Posterior logit mean (unactivated) and spread (softplus), as scalars.
    pub fn predict_posterior(&self, tape: &mut Tape, zhat: Var, pass: &mut Pass<'_>) -> Result<(Var, Var)> {
        let mu = self.head(tape, &self.layout.mu_head.clone(), zhat, pass)?;
        let s = self.head(tape, &self.layout.sigma_head.clone(), zhat, pass)?;
        let sigma = tape.activation(Activation::Softplus, s);
        Ok((mu, sigma))
    }

    /// Encoder, projection and heads for one graph.
    pub fn forward(&self, tape: &mut Tape, graph: &RadialGraph, pass: &mut Pass<'_>) -> Result<SampleVars> {
        let zhat = self.encode(tape, graph)?;
        let z = self.project(tape, zhat, pass)?;
        let (mu, sigma) = self.predict_posterior(tape, zhat, pass)?;
        Ok(SampleVars { zhat, z, mu, sigma })
    }

    /// Eval-mode posterior for one graph.
    pub fn posterior(&self, graph: &RadialGraph) -> Result<Posterior> {
        let mut tape = Tape::new();
        let zhat = self.encode(&mut tape, graph)?;
        let (mu, sigma) = self.predict_posterior(&mut tape, zhat, &mut Pass::eval())?;
        Ok(Posterior {
            mu: tape.item(mu),
            sigma: tape.item(sigma),
        })
    }

    /// Eval-mode `(zhat, z, posterior)` as plain values.
    pub fn embed(&self, graph: &RadialGraph) -> Result<(Vec<f64>, Vec<f64>, Posterior)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, graph, &mut Pass::eval())?;
        Ok((
            tape.values(out.zhat).to_vec(),
            tape.values(out.z).to_vec(),
            Posterior {
                mu: tape.item(out.mu),
                sigma: tape.item(out.sigma),
            },
        ))
    }

    /// Point prediction from the posterior mean, in label space.
    pub fn point_prediction(&self, post: Posterior) -> Result<f64> {
        activate_prediction(post.mu, self.task, self.prior.as_ref())
    }
}

fn activate_prediction(logit: f64, task: TaskKind, prior: Option<&PriorStats>) -> Result<f64> {
    match task {
        TaskKind::Classification => Ok(crate::tensor::sigmoid(logit)),
        TaskKind::Regression => {
            let p = prior.ok_or_else(|| ModelError::Contract("regression requires prior stats".into()))?;
            Ok(crate::tensor::tanhshrink(logit) * p.sigma_t + p.mu_t)
        }
    }
}

/// Draws `m` reparameterized predictions `act(mu + sigma * eps)`.
///
/// Classification applies a sigmoid; regression applies tanhshrink and
/// rescales by the training prior.
pub fn sample_predictions<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    m: usize,
    task: TaskKind,
    prior: Option<&PriorStats>,
    rng: &mut R,
) -> Result<Var> {
    if m == 0 {
        return Err(ModelError::Contract("need at least one posterior sample".into()));
    }
    if task == TaskKind::Regression && prior.is_none() {
        return Err(ModelError::Contract("regression requires prior stats".into()));
    }
    let eps: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(vec![m], eps)?;
    let spread = tape.mul(sigma, eps)?;
    let logits = tape.add(spread, mu)?;
    Ok(match task {
        TaskKind::Classification => tape.activation(Activation::Sigmoid, logits),
        TaskKind::Regression => {
            let p = prior.expect("checked above");
            let t = tape.activation(Activation::Tanhshrink, logits);
            let t = tape.mul_scalar(t, p.sigma_t);
            tape.add_scalar(t, p.mu_t)
        }
    })
}

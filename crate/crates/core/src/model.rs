//! CNN feature extractor followed by either a stack of multi-head
//! self-attention blocks or a bidirectional GRU baseline, with a two-layer
//! fully connected ACCDOA regressor on top.

use crate::accdoa::N_CLASSES;
use crate::dsp::{FeatureStats, N_FEATURE_CHANNELS, N_MELS};
use crate::error::{dim_err, Result, SeldError};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const POS_EMB_INIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalModule {
    Mhsa,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters. The attention knobs (`n_blocks`, `n_heads`,
/// `use_pos_emb`, `use_ln_residual`, `attn_dims`) are the ablation axes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub temporal_module: TemporalModule,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub use_pos_emb: bool,
    pub use_ln_residual: bool,
    /// Per-head query/key/value width of each attention block.
    pub attn_dims: Vec<usize>,
    /// Divide attention logits by the square root of the key width.
    pub scale_attention: bool,
    pub in_channels: usize,
    pub n_mels: usize,
    pub conv_channels: usize,
    /// (time, frequency) max-pool factors of the three CNN blocks.
    pub pool_sizes: Vec<[usize; 2]>,
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
    pub n_classes: usize,
    /// Label frames per chunk (T').
    pub label_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mhsa(2, 8, true, true)
    }
}

impl ModelConfig {
    /// CNN + MHSA with `n_blocks` blocks of width 128.
    pub fn mhsa(n_blocks: usize, n_heads: usize, use_pos_emb: bool, use_ln_residual: bool) -> Self {
        Self {
            temporal_module: TemporalModule::Mhsa,
            n_blocks,
            n_heads,
            use_pos_emb,
            use_ln_residual,
            attn_dims: vec![128; n_blocks],
            scale_attention: true,
            in_channels: N_FEATURE_CHANNELS,
            n_mels: N_MELS,
            conv_channels: 64,
            pool_sizes: vec![[5, 4], [1, 4], [1, 2]],
            gru_layers: 2,
            gru_hidden: 128,
            fc_hidden: 128,
            n_classes: N_CLASSES,
            label_frames: 50,
        }
    }

    /// The CRNN baseline: two bidirectional GRU layers.
    pub fn baseline() -> Self {
        Self {
            temporal_module: TemporalModule::Gru,
            n_blocks: 0,
            n_heads: 0,
            use_pos_emb: false,
            use_ln_residual: false,
            attn_dims: Vec::new(),
            ..Self::mhsa(1, 1, false, false)
        }
    }

    pub fn with_attn_dims(mut self, dims: Vec<usize>) -> Self {
        self.n_blocks = dims.len();
        self.attn_dims = dims;
        self
    }

    /// Feature frames per chunk (T = T' · time pooling).
    pub fn feature_frames(&self) -> usize {
        self.label_frames * self.time_pool()
    }

    fn time_pool(&self) -> usize {
        self.pool_sizes.iter().map(|p| p[0]).product()
    }

    fn freq_pool(&self) -> usize {
        self.pool_sizes.iter().map(|p| p[1]).product()
    }

    /// Width of the CNN output per time step (F').
    pub fn feature_width(&self) -> usize {
        self.conv_channels * (self.n_mels / self.freq_pool().max(1))
    }

    /// Width entering the regressor.
    pub fn temporal_width(&self) -> usize {
        match self.temporal_module {
            TemporalModule::Mhsa => self.feature_width(),
            TemporalModule::Gru => self.gru_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SeldError::Input(format!("invalid model config: {msg}")));
        if self.pool_sizes.len() != 3 {
            return fail(format!("need 3 pool sizes, got {}", self.pool_sizes.len()));
        }
        if self.pool_sizes.iter().flatten().any(|&p| p == 0) {
            return fail("pool factors must be positive".into());
        }
        if self.n_mels % self.freq_pool() != 0 {
            return fail(format!(
                "{} mel bins not divisible by frequency pooling {}",
                self.n_mels,
                self.freq_pool()
            ));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("conv_channels", self.conv_channels),
            ("fc_hidden", self.fc_hidden),
            ("n_classes", self.n_classes),
            ("label_frames", self.label_frames),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        match self.temporal_module {
            TemporalModule::Mhsa => {
                if self.n_blocks == 0 || self.n_heads == 0 {
                    return fail("attention needs at least one block and one head".into());
                }
                if self.attn_dims.len() != self.n_blocks {
                    return fail(format!(
                        "attn_dims has {} entries for {} blocks",
                        self.attn_dims.len(),
                        self.n_blocks
                    ));
                }
                if self.attn_dims.contains(&0) {
                    return fail("attention widths must be positive".into());
                }
            }
            TemporalModule::Gru => {
                if self.gru_layers == 0 || self.gru_hidden == 0 {
                    return fail("GRU needs at least one layer of positive width".into());
                }
            }
        }
        Ok(())
    }

    /// Short identifier used for output directories and result tables.
    pub fn id(&self) -> String {
        match self.temporal_module {
            TemporalModule::Gru => "baseline".to_string(),
            TemporalModule::Mhsa => {
                let dims: Vec<String> = self.attn_dims.iter().map(|d| d.to_string()).collect();
                format!(
                    "n{}_m{}_p{}_ln{}_{}",
                    self.n_blocks,
                    self.n_heads,
                    u8::from(self.use_pos_emb),
                    u8::from(self.use_ln_residual),
                    dims.join("-")
                )
            }
        }
    }

    /// Trainable parameter count, computed in closed form.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = self.in_channels;
        for _ in &self.pool_sizes {
            total += self.conv_channels * cin * 9 + self.conv_channels; // conv
            total += 2 * self.conv_channels; // bn affine
            cin = self.conv_channels;
        }
        let d = self.feature_width();
        match self.temporal_module {
            TemporalModule::Mhsa => {
                if self.use_pos_emb {
                    total += self.label_frames * d;
                }
                for &a in &self.attn_dims {
                    total += self.n_heads * 3 * d * a + self.n_heads * a * d;
                    if self.use_ln_residual {
                        total += 2 * d;
                    }
                }
            }
            TemporalModule::Gru => {
                let h = self.gru_hidden;
                let mut din = d;
                for _ in 0..self.gru_layers {
                    total += 2 * (3 * din * h + 3 * h * h + 3 * h);
                    din = h;
                }
            }
        }
        let w = self.temporal_width();
        total += w * self.fc_hidden + self.fc_hidden;
        total += self.fc_hidden * self.n_classes * 3 + self.n_classes * 3;
        total
    }
}

/// Insertion-ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameters of one model bound as leaves on a graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn bind(g: &mut Graph, params: &ParamStore, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| SeldError::Input(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Batch-norm statistics collected during a training-mode forward pass.
pub type BnUpdates = Vec<(usize, Vec<f64>, Vec<f64>, usize)>;

/// Weights, running statistics and feature normalization of one network.
#[derive(Clone, Debug)]
pub struct SeldModel {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    feature_stats: FeatureStats,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl SeldModel {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut buffers = ParamStore::default();
        let c = config.conv_channels;
        let mut cin = config.in_channels;
        for n in 1..=config.pool_sizes.len() {
            params.insert(
                format!("cnn.b{n}.conv.w"),
                uniform(&[c, cin, 3, 3], cin * 9, &mut rng),
            );
            params.insert(format!("cnn.b{n}.conv.b"), Tensor::zeros(&[c]));
            params.insert(format!("cnn.b{n}.bn.gamma"), Tensor::ones(&[c]));
            params.insert(format!("cnn.b{n}.bn.beta"), Tensor::zeros(&[c]));
            buffers.insert(format!("cnn.b{n}.bn.rmean"), Tensor::zeros(&[c]));
            buffers.insert(format!("cnn.b{n}.bn.rvar"), Tensor::ones(&[c]));
            cin = c;
        }
        let d = config.feature_width();
        match config.temporal_module {
            TemporalModule::Mhsa => {
                if config.use_pos_emb {
                    params.insert(
                        "posemb",
                        Tensor::uniform(&[config.label_frames, d], POS_EMB_INIT, &mut rng),
                    );
                }
                for (bi, &a) in config.attn_dims.iter().enumerate() {
                    let n = bi + 1;
                    for m in 1..=config.n_heads {
                        for w in ["wq", "wk", "wv"] {
                            params
                                .insert(format!("sa.b{n}.h{m}.{w}"), uniform(&[d, a], d, &mut rng));
                        }
                    }
                    let wide = config.n_heads * a;
                    params.insert(format!("sa.b{n}.wp"), uniform(&[wide, d], wide, &mut rng));
                    if config.use_ln_residual {
                        params.insert(format!("sa.b{n}.ln.gamma"), Tensor::ones(&[d]));
                        params.insert(format!("sa.b{n}.ln.beta"), Tensor::zeros(&[d]));
                    }
                }
            }
            TemporalModule::Gru => {
                let h = config.gru_hidden;
                let mut din = d;
                for l in 1..=config.gru_layers {
                    for dir in ["fwd", "bwd"] {
                        let p = format!("gru.l{l}.{dir}");
                        for w in ["wz", "wr", "wh"] {
                            params.insert(format!("{p}.{w}"), uniform(&[din, h], din, &mut rng));
                        }
                        for u in ["uz", "ur", "uh"] {
                            params.insert(format!("{p}.{u}"), uniform(&[h, h], h, &mut rng));
                        }
                        for b in ["bz", "br", "bh"] {
                            params.insert(format!("{p}.{b}"), Tensor::zeros(&[h]));
                        }
                    }
                    din = h;
                }
            }
        }
        let w = config.temporal_width();
        let out = config.n_classes * 3;
        params.insert("fc1.w", uniform(&[w, config.fc_hidden], w, &mut rng));
        params.insert("fc1.b", Tensor::zeros(&[config.fc_hidden]));
        params.insert(
            "fc2.w",
            uniform(&[config.fc_hidden, out], config.fc_hidden, &mut rng),
        );
        params.insert("fc2.b", Tensor::zeros(&[out]));
        Ok(Self {
            config,
            params,
            buffers,
            feature_stats: FeatureStats::identity(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn feature_stats(&self) -> &FeatureStats {
        &self.feature_stats
    }

    pub fn set_feature_stats(&mut self, stats: FeatureStats) {
        self.feature_stats = stats;
    }

    /// Trainable element count of the instantiated weights.
    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Runs the network on `x: [B, C_in, T, n_mels]`, returning the bound
    /// parameters and the `[B, T', classes, 3]` output.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Bound, Var, BnUpdates)> {
        let bound = Bound::bind(g, &self.params, trainable);
        let mut bn = Vec::new();
        let h = self.cnn_extractor(g, &bound, x, mode, &mut bn)?;
        let h = match self.config.temporal_module {
            TemporalModule::Mhsa => self.sa_stack(g, &bound, h)?,
            TemporalModule::Gru => self.gru_stack(g, &bound, h)?,
        };
        let y = self.head(g, &bound, h)?;
        Ok((bound, y, bn))
    }

    /// Three conv → batch norm → ReLU → max-pool blocks, then
    /// `[B, C, T', F_r] → [B, T', C·F_r]`.
    pub fn cnn_extractor(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mode: Mode,
        bn: &mut BnUpdates,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let cfg = &self.config;
        if s.len() != 4
            || s[1] != cfg.in_channels
            || s[3] != cfg.n_mels
            || s[2] % cfg.time_pool() != 0
        {
            return dim_err(
                "cnn_extractor",
                format!(
                    "expected B×{}×(multiple of {})×{}, got {s:?}",
                    cfg.in_channels,
                    cfg.time_pool(),
                    cfg.n_mels
                ),
            );
        }
        let mut h = x;
        for (i, pool) in cfg.pool_sizes.iter().enumerate() {
            let n = i + 1;
            h = g.conv2d(
                h,
                p.var(&format!("cnn.b{n}.conv.w"))?,
                p.var(&format!("cnn.b{n}.conv.b"))?,
            )?;
            let gamma = p.var(&format!("cnn.b{n}.bn.gamma"))?;
            let beta = p.var(&format!("cnn.b{n}.bn.beta"))?;
            h = match mode {
                Mode::Train => {
                    let (out, stats) = g.batch_norm_train(h, gamma, beta, BN_EPS)?;
                    bn.push((i, stats.mean, stats.var, stats.count));
                    out
                }
                Mode::Eval => {
                    let rm = self.buffer(&format!("cnn.b{n}.bn.rmean"))?;
                    let rv = self.buffer(&format!("cnn.b{n}.bn.rvar"))?;
                    g.batch_norm_eval(h, gamma, beta, rm.data(), rv.data(), BN_EPS)?
                }
            };
            h = g.relu(h);
            h = g.max_pool2d(h, (pool[0], pool[1]))?;
        }
        let s = g.shape(h).to_vec();
        let h = g.permute(h, &[0, 2, 1, 3])?;
        g.reshape(h, &[s[0], s[2], s[1] * s[3]])
    }

    /// Serial attention blocks, each `LN(MHSA(h) + h)` when residual layer
    /// norm is enabled and a bare `MHSA(h)` otherwise. The learnt position
    /// table is added to the input of the first block only.
    pub fn sa_stack(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let cfg = &self.config;
        let mut h = h;
        if cfg.use_pos_emb {
            h = g.add_broadcast(h, p.var("posemb")?)?;
        }
        for n in 1..=cfg.n_blocks {
            let heads = (1..=cfg.n_heads)
                .map(|m| {
                    Ok([
                        p.var(&format!("sa.b{n}.h{m}.wq"))?,
                        p.var(&format!("sa.b{n}.h{m}.wk"))?,
                        p.var(&format!("sa.b{n}.h{m}.wv"))?,
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            let a = mhsa(
                g,
                h,
                &heads,
                p.var(&format!("sa.b{n}.wp"))?,
                cfg.scale_attention,
            )?;
            h = if cfg.use_ln_residual {
                let sum = g.add(a, h)?;
                g.layer_norm(
                    sum,
                    p.var(&format!("sa.b{n}.ln.gamma"))?,
                    p.var(&format!("sa.b{n}.ln.beta"))?,
                    LN_EPS,
                )?
            } else {
                a
            };
        }
        Ok(h)
    }

    /// Stacked bidirectional GRU layers with summed directions.
    pub fn gru_stack(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let mut h = h;
        for l in 1..=self.config.gru_layers {
            let fwd = GruWeights::bind(p, &format!("gru.l{l}.fwd"))?;
            let bwd = GruWeights::bind(p, &format!("gru.l{l}.bwd"))?;
            h = gru_bidirectional(g, h, &fwd, &bwd)?;
        }
        Ok(h)
    }

    /// `tanh(FC2(FC1(h)))` reshaped to `[B, T', classes, 3]`.
    pub fn head(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0] * s[1], s[2]])?;
        let y = linear(g, flat, p.var("fc1.w")?, p.var("fc1.b")?)?;
        let y = linear(g, y, p.var("fc2.w")?, p.var("fc2.b")?)?;
        let y = g.tanh(y);
        g.reshape(y, &[s[0], s[1], self.config.n_classes, 3])
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| SeldError::Input(format!("missing buffer {name}")))
    }

    /// Eval-mode prediction for a `[B, C_in, T, n_mels]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (_, y, _) = self.forward(&mut g, xv, Mode::Eval, false)?;
        Ok(g.value(y).clone())
    }

    /// Mean squared error of a training-mode forward pass against `target`,
    /// without updating anything.
    pub fn loss(&self, x: &Tensor, target: &Tensor, mode: Mode) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (_, y, _) = self.forward(&mut g, xv, mode, false)?;
        let t = g.constant(target.clone());
        let l = g.mse(y, t)?;
        Ok(g.value(l).data()[0])
    }

    /// Forward, backward and one Adam update on a batch. Returns the
    /// pre-update loss.
    pub fn train_step(&mut self, opt: &mut AdamState, x: &Tensor, target: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (bound, y, bn) = self.forward(&mut g, xv, Mode::Train, true)?;
        let t = g.constant(target.clone());
        let loss = g.mse(y, t)?;
        g.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| g.grad(v).expect("parameters require grad"))
            .collect();
        let value = g.value(loss).data()[0];
        drop(g);
        let mut refs: Vec<&mut Tensor> = self.params.tensors_mut().iter_mut().collect();
        opt.step(&mut refs, &grads)?;
        self.update_running_stats(&bn);
        Ok(value)
    }

    fn update_running_stats(&mut self, bn: &BnUpdates) {
        for (i, mean, var, count) in bn {
            let n = i + 1;
            let unbias = if *count > 1 {
                *count as f64 / (*count - 1) as f64
            } else {
                1.0
            };
            let rm = self
                .buffers
                .get_mut(&format!("cnn.b{n}.bn.rmean"))
                .expect("bn buffer");
            for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self
                .buffers
                .get_mut(&format!("cnn.b{n}.bn.rvar"))
                .expect("bn buffer");
            for (r, v) in rv.data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    pub fn new_optimizer(&self, config: AdamConfig) -> AdamState {
        let refs: Vec<&Tensor> = self.params.tensors().iter().collect();
        AdamState::new(config, &refs)
    }

    /// Every tensor for the checkpoint archive: weights, then batch-norm
    /// running statistics, then feature statistics.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.params.iter() {
            out.push((name.to_string(), t.clone()));
            if let Some(prefix) = name.strip_suffix(".bn.beta") {
                for b in ["rmean", "rvar"] {
                    let key = format!("{prefix}.bn.{b}");
                    out.push((
                        key.clone(),
                        self.buffers.get(&key).expect("bn buffer").clone(),
                    ));
                }
            }
        }
        let (mean, std) = self.feature_stats.to_tensors();
        out.push(("featstat.mean".into(), mean));
        out.push(("featstat.std".into(), std));
        out
    }

    /// Rebuilds a model from archive entries, checking every tensor against
    /// the shapes implied by `config`.
    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut seen = 0usize;
        let mut mean = None;
        let mut std = None;
        for (name, t) in entries {
            let slot = if name == "featstat.mean" {
                mean = Some(t);
                continue;
            } else if name == "featstat.std" {
                std = Some(t);
                continue;
            } else if let Some(p) = model.params.get_mut(&name) {
                p
            } else if let Some(b) = model.buffers.get_mut(&name) {
                b
            } else {
                return Err(SeldError::Input(format!(
                    "checkpoint tensor {name} does not belong to config {}",
                    model.config.id()
                )));
            };
            if slot.shape() != t.shape() {
                return Err(SeldError::Input(format!(
                    "checkpoint tensor {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            seen += 1;
        }
        let expected = model.params.len() + model.buffers.len();
        if seen != expected {
            return Err(SeldError::Input(format!(
                "checkpoint holds {seen} of {expected} model tensors"
            )));
        }
        match (mean, std) {
            (Some(m), Some(s)) => model.feature_stats = FeatureStats::from_tensors(&m, &s)?,
            _ => {
                return Err(SeldError::Input(
                    "checkpoint lacks featstat.mean/std".into(),
                ))
            }
        }
        Ok(model)
    }
}

/// `x·W + b` on a 2-D input.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

/// `x: [B, T, I] · W: [I, O] -> [B, T, O]`.
fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let o = g.shape(w)[1];
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = g.matmul(flat, w)?;
    g.reshape(y, &[s[0], s[1], o])
}

/// Scaled dot-product self-attention of one head on `h: [B, T, I]`:
/// `softmax((H·Wq)(H·Wk)ᵀ / √K) · H·Wv`.
pub fn self_attention(
    g: &mut Graph,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    scale: bool,
) -> Result<Var> {
    let q = project(g, h, wq)?;
    let k = project(g, h, wk)?;
    let v = project(g, h, wv)?;
    let mut scores = g.batch_matmul(q, k, true)?;
    if scale {
        let key_dim = g.shape(wk)[1] as f64;
        scores = g.scale(scores, 1.0 / key_dim.sqrt());
    }
    let attn = g.softmax(scores, 2)?;
    g.batch_matmul(attn, v, false)
}

/// Concatenates the per-head outputs and projects them with `wp`.
pub fn mhsa(g: &mut Graph, h: Var, heads: &[[Var; 3]], wp: Var, scale: bool) -> Result<Var> {
    if heads.is_empty() {
        return Err(SeldError::Input("mhsa needs at least one head".into()));
    }
    let outs = heads
        .iter()
        .map(|&[wq, wk, wv]| self_attention(g, h, wq, wk, wv, scale))
        .collect::<Result<Vec<_>>>()?;
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, 2)?
    };
    project(g, cat, wp)
}

/// One direction's GRU weights as graph variables.
pub struct GruWeights {
    pub wz: Var,
    pub wr: Var,
    pub wh: Var,
    pub uz: Var,
    pub ur: Var,
    pub uh: Var,
    pub bz: Var,
    pub br: Var,
    pub bh: Var,
}

impl GruWeights {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| p.var(&format!("{prefix}.{n}"));
        Ok(Self {
            wz: v("wz")?,
            wr: v("wr")?,
            wh: v("wh")?,
            uz: v("uz")?,
            ur: v("ur")?,
            uh: v("uh")?,
            bz: v("bz")?,
            br: v("br")?,
            bh: v("bh")?,
        })
    }
}

/// Runs one GRU direction over `x: [B, T, D]`, starting from a zero state:
///
/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `ĥ = tanh(xWh + (r⊙h)Uh + bh)`, `h' = (1−z)⊙h + z⊙ĥ`.
pub fn gru_direction(g: &mut Graph, x: Var, w: &GruWeights, reverse: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (batch, steps) = (s[0], s[1]);
    let hidden = g.shape(w.uz)[0];
    for (name, v, shape) in [
        ("wz", w.wz, [s[2], hidden]),
        ("wr", w.wr, [s[2], hidden]),
        ("wh", w.wh, [s[2], hidden]),
        ("uz", w.uz, [hidden, hidden]),
        ("ur", w.ur, [hidden, hidden]),
        ("uh", w.uh, [hidden, hidden]),
    ] {
        if g.shape(v) != shape {
            return dim_err(
                "gru",
                format!("{name} is {:?}, expected {shape:?}", g.shape(v)),
            );
        }
    }
    for (name, v) in [("bz", w.bz), ("br", w.br), ("bh", w.bh)] {
        if g.shape(v) != [hidden] {
            return dim_err(
                "gru",
                format!("{name} is {:?}, expected [{hidden}]", g.shape(v)),
            );
        }
    }
    // input projections for every step at once
    let w_in = g.concat(&[w.wz, w.wr, w.wh], 1)?;
    let b_in = g.concat(&[w.bz, w.br, w.bh], 0)?;
    let xw = project(g, x, w_in)?;
    let xw = g.add_broadcast(xw, b_in)?;
    let u_zr = g.concat(&[w.uz, w.ur], 1)?;
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut outs = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let xt = g.narrow(xw, 1, t, 1)?;
        let xt = g.reshape(xt, &[batch, 3 * hidden])?;
        let x_zr = g.narrow(xt, 1, 0, 2 * hidden)?;
        let x_h = g.narrow(xt, 1, 2 * hidden, hidden)?;
        let h_zr = g.matmul(h, u_zr)?;
        let pre = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(pre);
        let z = g.narrow(zr, 1, 0, hidden)?;
        let r = g.narrow(zr, 1, hidden, hidden)?;
        let rh = g.mul(r, h)?;
        let rh_u = g.matmul(rh, w.uh)?;
        let cand_pre = g.add(x_h, rh_u)?;
        let cand = g.tanh(cand_pre);
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        h = g.add(h, step)?;
        outs[t] = Some(g.reshape(h, &[batch, 1, hidden])?);
    }
    let outs: Vec<Var> = outs
        .into_iter()
        .map(|o| o.expect("every step visited"))
        .collect();
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Forward and backward GRU passes over `x: [B, T, D]`, merged by summation.
pub fn gru_bidirectional(g: &mut Graph, x: Var, fwd: &GruWeights, bwd: &GruWeights) -> Result<Var> {
    let f = gru_direction(g, x, fwd, false)?;
    let b = gru_direction(g, x, bwd, true)?;
    g.add(f, b)
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return dim_err(
            "mse_loss",
            format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            ),
        );
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

//! Model frontend: configuration, weight files, graph definition and the
//! generation loop.

mod config;
pub mod toy;
mod weights;

use std::path::Path;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use config::{ModelConfig, CONFIG_TENSOR};
pub use toy::{toy_model, ToyWeights};
pub use weights::{WeightFile, MAGIC, VERSION};

use crate::graph::{
    build_attention_block, build_mlp_block, AttentionWeights, BlockDims, Graph, GraphBuilder, GraphError, KvCache, KvError,
    MlpWeights,
};
use crate::kernels::argmax;
use crate::memory::{MemoryError, MemoryPool, NodeLayout, NumaMode};
use crate::scheduler::{execute, ExecError, ExecOptions, Schedule, StepInput, SyncMode};
use crate::tensor::{DType, TensorError, TensorId};
use crate::threads::ThreadPool;
use crate::tp::{plan_partition, PartitionDims, PartitionPlan, PlanError};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o on {0}")]
    Io(String, #[source] std::io::Error),
    #[error("bad magic {0:?}, expected \"ALTW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("duplicate tensor `{0}`")]
    DuplicateName(String),
    #[error("`{name}`: data length {actual}, expected {expected}")]
    Length {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("`{name}` has shape {actual:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("partition: {0}")]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("{needed} positions needed, max_seq is {max_seq}")]
    Capacity { needed: usize, max_seq: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("invalid engine config: {0}")]
    Engine(String),
}

/// Execution settings independent of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineConfig {
    pub numa_mode: NumaMode,
    pub nodes: usize,
    pub threads: usize,
    pub tp: usize,
    pub sync: SyncMode,
    /// Core for each worker thread.
    pub bind_cores: Option<Vec<usize>>,
    pub check_locality: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            numa_mode: NumaMode::Emulated,
            nodes: 1,
            threads: 1,
            tp: 1,
            sync: SyncMode::A,
            bind_cores: None,
            check_locality: false,
        }
    }
}

/// Output of one generation call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub prefill: Duration,
    pub decode: Duration,
    /// Forward steps counted in `decode`.
    pub decode_steps: usize,
}

struct Built {
    caches: Vec<KvCache>,
    logits: TensorId,
}

/// A loaded model bound to its memory and thread pool.
pub struct Model {
    config: ModelConfig,
    engine: EngineConfig,
    plan: PartitionPlan,
    memory: MemoryPool,
    graph: Graph,
    schedule: Schedule,
    pool: ThreadPool,
    caches: Vec<KvCache>,
    logits: TensorId,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("engine", &self.engine)
            .finish()
    }
}

fn check_shapes(wf: &WeightFile, cfg: &ModelConfig) -> Result<(), LoadError> {
    for (name, dims) in cfg.weight_shapes() {
        let t = wf.require(&name)?;
        if t.shape.dims() != dims.as_slice() {
            return Err(LoadError::ShapeMismatch {
                name,
                expected: dims,
                actual: t.shape.dims().to_vec(),
            });
        }
        if dims.len() == 1 && t.dtype != DType::F32 {
            return Err(LoadError::Format(format!("norm `{name}` must be F32, is {}", t.dtype)));
        }
    }
    Ok(())
}

fn build(b: &mut GraphBuilder<'_>, wf: &WeightFile, cfg: &ModelConfig, plan: &PartitionPlan) -> Result<Built, LoadError> {
    let w = |name: &str| wf.require(name);
    let dims = BlockDims {
        hidden: cfg.hidden,
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim,
        rope_theta: cfg.rope_theta,
        rms_eps: cfg.rms_eps,
    };
    b.set_layer(0);
    let embd = b.leaf_data(w("token_embd")?, 0)?;
    let mut x = b.embed(embd, "embed")?;
    let mut caches = Vec::new();
    for i in 0..cfg.n_layers {
        b.set_layer(i + 1);
        let p = |s: &str| format!("blk.{i}.{s}");
        let aw = AttentionWeights {
            norm: b.leaf_data(w(&p("attn_norm"))?, 0)?,
            q: plan.materialize(b, &plan.q, w(&p("attn_q"))?)?,
            k: plan.materialize(b, &plan.k, w(&p("attn_k"))?)?,
            v: plan.materialize(b, &plan.v, w(&p("attn_v"))?)?,
            o: plan.materialize(b, &plan.o, w(&p("attn_output"))?)?,
        };
        let mw = MlpWeights {
            norm: b.leaf_data(w(&p("ffn_norm"))?, 0)?,
            gate: plan.materialize(b, &plan.gate, w(&p("ffn_gate"))?)?,
            up: plan.materialize(b, &plan.up, w(&p("ffn_up"))?)?,
            down: plan.materialize(b, &plan.down, w(&p("ffn_down"))?)?,
        };
        let layer_caches = (0..plan.lanes)
            .map(|lane| b.kv_create(i, lane, plan.lane_nodes[lane], cfg.max_seq, plan.kv_heads_per_lane, cfg.head_dim))
            .collect::<Result<Vec<_>, _>>()?;
        let prefix = format!("layer.{i}");
        x = build_attention_block(b, x, &aw, &layer_caches, &dims, &prefix)?;
        x = build_mlp_block(b, x, &mw, &dims, &prefix)?;
        caches.extend(layer_caches);
    }
    b.set_layer(cfg.n_layers + 1);
    let norm = b.leaf_data(w("output_norm")?, 0)?;
    let h = b.rmsnorm(&x.into(), &norm.into(), cfg.rms_eps, "final_norm")?;
    let head = b.leaf_data(w("output")?, 0)?;
    let logits = b.linear(&h, &head.into(), "logits")?;
    Ok(Built {
        caches,
        logits: logits.single().expect("serial head"),
    })
}

impl Model {
    pub fn load(path: &Path, engine: EngineConfig) -> Result<Self, RuntimeError> {
        Self::new(&WeightFile::load(path)?, engine)
    }

    pub fn new(wf: &WeightFile, engine: EngineConfig) -> Result<Self, RuntimeError> {
        let config = wf.config()?;
        check_shapes(wf, &config)?;
        if engine.threads == 0 || engine.nodes == 0 || engine.tp == 0 {
            return Err(RuntimeError::Engine("threads, nodes and tp must be positive".into()));
        }
        if let Some(cores) = &engine.bind_cores {
            if cores.len() != engine.threads {
                return Err(RuntimeError::Engine(format!(
                    "{} cores listed for {} threads",
                    cores.len(),
                    engine.threads
                )));
            }
        }
        let quantized = ["attn_q", "attn_k", "attn_v", "attn_output", "ffn_gate", "ffn_up", "ffn_down"]
            .iter()
            .any(|n| (0..config.n_layers).any(|i| wf.get(&format!("blk.{i}.{n}")).is_some_and(|t| t.dtype == DType::Q4B)));
        let pdims = PartitionDims {
            hidden: config.hidden,
            intermediate: config.intermediate,
            n_heads: config.n_heads,
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
            quantized,
        };
        let plan = plan_partition(
            &pdims,
            engine.tp,
            Some((0..engine.tp).map(|l| l % engine.nodes).collect()),
        )
        .map_err(LoadError::from)?;

        let layout = NodeLayout::new(engine.numa_mode, engine.nodes)?;
        let mut measure = MemoryPool::measuring(layout.clone());
        build(&mut GraphBuilder::new(&mut measure), wf, &config, &plan)?;
        let mut memory = MemoryPool::create(
            layout,
            measure.max_weight_high_water().max(1),
            measure.max_activation_high_water().max(1),
        )?;
        let mut b = GraphBuilder::new(&mut memory);
        let built = build(&mut b, wf, &config, &plan)?;
        let graph = b.finish();
        let schedule = Schedule::compile(&graph)?;
        let pool = ThreadPool::spawn_with_affinity(engine.threads, engine.bind_cores.clone());
        log::debug!(
            "model ready: {} nodes, {} regions, {} threads",
            graph.exec().len(),
            schedule.region_count(),
            engine.threads
        );
        Ok(Self {
            config,
            engine,
            plan,
            memory,
            graph,
            schedule,
            pool,
            caches: built.caches,
            logits: built.logits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn memory(&self) -> &MemoryPool {
        &self.memory
    }

    pub fn pool(&self) -> &ThreadPool {
        &self.pool
    }

    pub fn set_sync(&mut self, sync: SyncMode) {
        self.engine.sync = sync;
    }

    /// Positions already held in the KV caches.
    pub fn position(&self) -> usize {
        self.caches.first().map_or(0, KvCache::len)
    }

    pub fn reset(&mut self) {
        self.caches.iter_mut().for_each(KvCache::reset);
    }

    /// Runs one token through the model at the next position and returns the
    /// logits.
    pub fn forward_step(&mut self, token: u32) -> Result<Vec<f32>, RuntimeError> {
        if token as usize >= self.config.vocab_size {
            return Err(RuntimeError::Token {
                token,
                vocab: self.config.vocab_size,
            });
        }
        let position = self.position();
        for c in &self.caches {
            c.check_next(position)?;
        }
        let opts = ExecOptions {
            trace: false,
            check_locality: self.engine.check_locality,
        };
        let input = StepInput {
            token: token as usize,
            position,
        };
        execute(
            &self.graph,
            &self.schedule,
            &mut self.memory,
            &self.pool,
            self.engine.sync,
            input,
            opts,
        )?;
        self.caches.iter_mut().for_each(KvCache::advance);
        Ok(self.memory.read_f32(&self.graph.tensor(self.logits).region))
    }

    /// Greedy generation from fresh caches; returns only the new tokens.
    pub fn generate(&mut self, prompt: &[u32], n_gen: usize) -> Result<Vec<u32>, RuntimeError> {
        Ok(self.generate_timed(prompt, n_gen)?.tokens)
    }

    pub fn generate_timed(&mut self, prompt: &[u32], n_gen: usize) -> Result<Generation, RuntimeError> {
        if prompt.is_empty() {
            return Err(RuntimeError::EmptyPrompt);
        }
        let needed = prompt.len() + n_gen;
        if needed > self.config.max_seq {
            return Err(RuntimeError::Capacity {
                needed,
                max_seq: self.config.max_seq,
            });
        }
        self.reset();
        let start = Instant::now();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.forward_step(t)?;
        }
        let prefill = start.elapsed();
        let start = Instant::now();
        let mut tokens = Vec::with_capacity(n_gen);
        let mut decode_steps = 0;
        while tokens.len() < n_gen {
            let next = argmax(&logits) as u32;
            tokens.push(next);
            if tokens.len() < n_gen {
                logits = self.forward_step(next)?;
                decode_steps += 1;
            }
        }
        Ok(Generation {
            tokens,
            prefill,
            decode: start.elapsed(),
            decode_steps,
        })
    }
}

/// Parses `1,2,3` (commas and/or whitespace) into token ids.
pub fn parse_token_list(s: &str) -> Result<Vec<u32>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| format!("invalid token id `{t}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(threads: usize, nodes: usize, tp: usize, sync: SyncMode) -> EngineConfig {
        EngineConfig {
            threads,
            nodes,
            tp,
            sync,
            check_locality: true,
            ..Default::default()
        }
    }

    #[test]
    fn node_count_for_one_layer() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::toy()
        };
        let wf = toy_model(&cfg, ToyWeights::Random, 0);
        let m = Model::new(&wf, EngineConfig::default()).unwrap();
        let per_layer = crate::graph::ATTENTION_TEMPLATE.len() + crate::graph::MLP_TEMPLATE.len();
        // embed + layer + final norm + head
        assert_eq!(m.graph().exec().len(), 1 + per_layer + 2);
    }

    #[test]
    fn forward_step_determinism_and_length() {
        let wf = toy_model(&ModelConfig::toy(), ToyWeights::Random, 5);
        let mut m = Model::new(&wf, engine(2, 1, 1, SyncMode::A)).unwrap();
        let a = m.forward_step(7).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(m.position(), 1);
        m.reset();
        assert_eq!(m.forward_step(7).unwrap(), a);
        assert!(matches!(m.forward_step(999), Err(RuntimeError::Token { .. })));
    }

    #[test]
    fn generate_edge_cases() {
        let wf = toy_model(&ModelConfig::toy(), ToyWeights::Integer, 1);
        let mut m = Model::new(&wf, engine(1, 1, 1, SyncMode::A)).unwrap();
        assert_eq!(m.generate(&[1, 2], 0).unwrap(), Vec::<u32>::new());
        assert!(matches!(m.generate(&[], 3), Err(RuntimeError::EmptyPrompt)));
        assert!(matches!(m.generate(&[1; 150], 11), Err(RuntimeError::Capacity { .. })));
        let a = m.generate(&[1, 2, 3], 8).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(m.generate(&[1, 2, 3], 8).unwrap(), a);
    }

    #[test]
    fn tp_argmax_agrees_with_serial() {
        let wf = toy_model(&ModelConfig::toy(), ToyWeights::Random, 9);
        let mut serial = Model::new(&wf, engine(1, 1, 1, SyncMode::A)).unwrap();
        let mut tp = Model::new(&wf, engine(2, 2, 2, SyncMode::B)).unwrap();
        let mut token = 3;
        for _ in 0..20 {
            let (a, b) = (serial.forward_step(token).unwrap(), tp.forward_step(token).unwrap());
            assert_eq!(argmax(&a), argmax(&b));
            token = argmax(&a) as u32;
        }
    }

    #[test]
    fn missing_and_mismatched_tensors() {
        let cfg = ModelConfig::toy();
        let mut wf = toy_model(&cfg, ToyWeights::Integer, 1);
        wf.tensors.retain(|t| t.name != "blk.1.ffn_up");
        let err = Model::new(&wf, EngineConfig::default()).unwrap_err();
        assert!(matches!(&err, RuntimeError::Load(LoadError::MissingTensor(n)) if n == "blk.1.ffn_up"), "{err}");

        let mut wf = toy_model(&cfg, ToyWeights::Integer, 1);
        let i = wf.tensors.iter().position(|t| t.name == "output_norm").unwrap();
        wf.tensors[i] = crate::tensor::HostTensor::from_f32("output_norm", &[32], &[1.0; 32]).unwrap();
        let err = Model::new(&wf, EngineConfig::default()).unwrap_err();
        assert!(matches!(err, RuntimeError::Load(LoadError::ShapeMismatch { .. })), "{err}");
    }

    #[test]
    fn token_list_parsing() {
        assert_eq!(parse_token_list("1, 2 ,3\n4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_token_list("1,x").is_err());
    }
}

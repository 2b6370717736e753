//! Feature extractor for the Fréchet layout distance: a small transformer
//! classifier trained to tell real layouts from position-jittered copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LayoutCorpus;
use crate::error::{Error, Result};
use crate::layout::{tokenize, Element, Layout, LayoutSchema, TokenSequence};
use crate::model::CheckpointFile;
use crate::model::{encode, init_params, ModelConfig, ModelParams, TokenBatch};
use crate::numerics::{Tape, Tensor, Var};
use crate::training::{adam_update, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub jitter_bins: u32,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl Default for FidTrainConfig {
    fn default() -> Self {
        FidTrainConfig {
            steps: 300,
            batch_size: 32,
            lr: 3e-3,
            jitter_bins: 3,
            embed_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            seed: 0,
        }
    }
}

/// Shifts every element's x and y bins by a nonzero offset in
/// `[-max_shift, max_shift]`, clamped to the bin range.
pub fn jitter_positions<R: Rng + ?Sized>(layout: &Layout, max_shift: u32, num_bins: u32, rng: &mut R) -> Result<Layout> {
    let shift = max_shift as i64;
    let mut out = layout.clone();
    for e in &mut out.elements {
        let mut bins = e.quantized(num_bins)?;
        for b in &mut bins[..2] {
            let mut d = 0;
            while d == 0 && shift > 0 {
                d = rng.gen_range(-shift..=shift);
            }
            *b = (*b as i64 + d).clamp(0, num_bins as i64 - 1) as u32;
        }
        *e = Element::from_bins(e.category, bins, num_bins)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidExtractor {
    pub params: ModelParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub schema: LayoutSchema,
}

struct Forward {
    pooled: Var,
    logits: Var,
}

impl FidExtractor {
    fn run(&self, tape: &mut Tape, trainable: bool, seqs: &[TokenSequence]) -> Result<(Forward, Vec<Var>)> {
        let batch = TokenBatch::from_sequences(seqs)?;
        let mut vars = self.params.register(tape, trainable);
        let (hw, hb) = if trainable {
            (tape.param(&self.head_w), tape.param(&self.head_b))
        } else {
            (tape.constant(&self.head_w), tape.constant(&self.head_b))
        };
        let h = encode(tape, &vars, self.params.config(), &batch, None, None)?;
        let pooled = tape.masked_mean_pool(h, batch.batch, &batch.valid)?;
        let logits = tape.matmul(pooled, hw)?;
        let logits = tape.add_bias(logits, hb)?;
        vars.push(hw);
        vars.push(hb);
        Ok((Forward { pooled, logits }, vars))
    }

    /// Pooled final-layer representations, one row per layout.
    pub fn features(&self, layouts: &[Layout]) -> Result<Vec<Vec<f64>>> {
        let d = self.params.config().embed_dim;
        let mut out = Vec::with_capacity(layouts.len());
        for chunk in layouts.chunks(64) {
            let seqs = chunk.iter().map(|l| tokenize(l, &self.schema)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let (fwd, _) = self.run(&mut tape, false, &seqs)?;
            out.extend(tape.value(fwd.pooled).chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Probability that each layout is real.
    pub fn real_probability(&self, layouts: &[Layout]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(layouts.len());
        for chunk in layouts.chunks(64) {
            let seqs = chunk.iter().map(|l| tokenize(l, &self.schema)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let (fwd, _) = self.run(&mut tape, false, &seqs)?;
            out.extend(tape.value(fwd.logits).chunks(2).map(|z| 1.0 / (1.0 + (z[0] - z[1]).exp())));
        }
        Ok(out)
    }

    /// Accuracy on `real` against jittered copies of it.
    pub fn accuracy(&self, real: &[Layout], jitter_bins: u32, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fake = real
            .iter()
            .map(|l| jitter_positions(l, jitter_bins, self.schema.num_bins(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pr = self.real_probability(real)?;
        let pf = self.real_probability(&fake)?;
        let correct = pr.iter().filter(|&&p| p > 0.5).count() + pf.iter().filter(|&&p| p <= 0.5).count();
        Ok(correct as f64 / (pr.len() + pf.len()) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<CheckpointFile> {
        let mut ck = CheckpointFile::new(self.params.clone());
        ck.extra.push(("classifier.w".into(), self.head_w.clone()));
        ck.extra.push(("classifier.b".into(), self.head_b.clone()));
        ck.metadata = serde_json::json!({ "schema": serde_json::to_value(&self.schema)? });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: CheckpointFile) -> Result<Self> {
        let missing = |n: &str| Error::Checkpoint(format!("extractor checkpoint lacks {n}"));
        let head_w = ck.extra("classifier.w").ok_or_else(|| missing("classifier.w"))?.clone();
        let head_b = ck.extra("classifier.b").ok_or_else(|| missing("classifier.b"))?.clone();
        let schema: LayoutSchema = serde_json::from_value(ck.metadata.get("schema").cloned().ok_or_else(|| missing("schema"))?)?;
        ck.params.check_schema(&schema)?;
        Ok(FidExtractor {
            params: ck.params,
            head_w,
            head_b,
            schema,
        })
    }
}

/// Trains the real-vs-jittered classifier on the corpus training split.
pub fn train_fid_extractor(corpus: &LayoutCorpus, config: &FidTrainConfig) -> Result<FidExtractor> {
    let train: Vec<Layout> = corpus.train().into_iter().cloned().collect();
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let schema = corpus.schema.clone();
    let mut mc = ModelConfig::desk(&schema);
    mc.embed_dim = config.embed_dim;
    mc.num_heads = config.num_heads;
    mc.ffn_dim = config.ffn_dim;
    mc.dropout = 0.0;
    let params = init_params(&mc, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let head_w = Tensor::truncated_normal(&[mc.embed_dim, 2], 0.02, &mut rng);
    let mut ex = FidExtractor {
        params,
        head_w,
        head_b: Tensor::zeros(&[2]),
        schema,
    };

    let opt = TrainConfig {
        lr: config.lr,
        ..TrainConfig::default()
    };
    let shapes: Vec<Vec<usize>> = ex
        .params
        .tensors()
        .iter()
        .chain([&ex.head_w, &ex.head_b])
        .map(|t| t.shape().to_vec())
        .collect();
    let mut m: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let mut v = m.clone();
    let half = config.batch_size.div_ceil(2);

    for step in 0..config.steps {
        let mut seqs = Vec::with_capacity(2 * half);
        let mut labels = Vec::with_capacity(2 * half);
        for _ in 0..half {
            let l = &train[rng.gen_range(0..train.len())];
            seqs.push(tokenize(l, &ex.schema)?);
            labels.push(1);
            let fake = jitter_positions(l, config.jitter_bins, ex.schema.num_bins(), &mut rng)?;
            seqs.push(tokenize(&fake, &ex.schema)?);
            labels.push(0);
        }
        let mut tape = Tape::new();
        let (fwd, vars) = ex.run(&mut tape, true, &seqs)?;
        let loss = tape.cross_entropy(fwd.logits, &labels, &vec![true; labels.len()])?;
        let loss_value = tape.scalar(loss).unwrap_or(f64::NAN);
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&x| tape.grad(x).map(<[f64]>::to_vec)).collect();
        let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !loss_value.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                lr: config.lr,
                grad_norm: norm,
                detail: "extractor loss is not finite".into(),
            });
        }
        let clip = if norm > 1.0 { 1.0 / norm } else { 1.0 };
        let n_model = ex.params.tensors().len();
        for (i, g) in grads.iter().enumerate() {
            let p = match i {
                i if i < n_model => ex.params.tensors_mut()[i].data_mut(),
                i if i == n_model => ex.head_w.data_mut(),
                _ => ex.head_b.data_mut(),
            };
            adam_update(&opt, step + 1, p, m[i].data_mut(), v[i].data_mut(), g.as_deref(), clip);
        }
    }
    Ok(ex)
}

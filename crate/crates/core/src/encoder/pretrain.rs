use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, similarity_logits, ClassEmbeddings, VisualEncoder, LN_EPS};
use crate::episodes::{random_labels, sample_images, DomainSpec};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    pub tau: f64,
    /// Weight of the token alignment term: every embedded patch token,
    /// projected to text space, is pulled towards its image's class
    /// embedding. 0 trains on the classification loss alone.
    pub align_weight: f64,
    pub seed: u64,
    /// Fresh images per class for the final accuracy estimate.
    pub eval_per_class: usize,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        Self { steps: 600, batch_size: 64, lr: 1e-3, tau: 0.01, align_weight: 1.0, seed: 0, eval_per_class: 10 }
    }
}

impl PretrainOpts {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain.lr must be > 0, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("pretrain.tau must be > 0, got {}", self.tau)));
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return Err(Error::Config("pretrain.align_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Accuracy over all source classes on freshly drawn images.
    pub train_accuracy: f64,
    pub seed: u64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[&mut Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g[j];
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains every encoder weight on source images with Adam. The loss is the
/// temperature-scaled cross-entropy over cosine similarities to the source
/// class embeddings, plus the optional token alignment term.
pub fn pretrain_source(
    enc: &mut VisualEncoder,
    classes: &ClassEmbeddings,
    source: &DomainSpec,
    opts: &PretrainOpts,
) -> Result<PretrainReport> {
    opts.validate()?;
    if source.classes() < 2 {
        return Err(Error::Argument("source domain needs at least two classes".into()));
    }
    if source.d_in() != enc.cfg.d_in || source.tokens() != enc.cfg.tokens || classes.dim() != enc.cfg.text_dim {
        return Err(Error::Config("source domain or class table does not match encoder dims".into()));
    }
    let text = classes.subset(&source.class_ids)?;
    let text_t = text.transpose()?;
    let (m, dt) = (enc.cfg.tokens, enc.cfg.text_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(&enc.params_mut());
    let mut losses = Vec::with_capacity(opts.steps);
    let all: Vec<usize> = (0..source.classes()).collect();

    for step in 0..opts.steps {
        let labels = random_labels(&mut rng, source.classes(), opts.batch_size);
        let batch = sample_images(source, &all, &labels, 0, &mut rng)?;
        let b = labels.len();

        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape, true);
        let x = tape.constant(batch.images);
        let out = enc.forward_on_tape(&mut tape, &vars, x, &[], None, None)?;
        let tt = tape.constant(text_t.clone());
        let logits = tape.matmul(out.cls, tt)?;
        let logits = tape.scale(logits, 1.0 / opts.tau);
        let mut loss = tape.softmax_cross_entropy(logits, &labels)?;
        if opts.align_weight > 0.0 {
            let rows: Vec<usize> = (0..b).flat_map(|i| (1..=m).map(move |j| i * (m + 1) + j)).collect();
            let p = tape.gather_rows(out.embedded, &rows)?;
            let p = tape.layer_norm(p, vars.ln_g, vars.ln_b, LN_EPS)?;
            let p = tape.matmul(p, vars.proj)?;
            let p = tape.l2_normalize_rows(p)?;
            let mut target = Vec::with_capacity(b * m * dt);
            for &y in &labels {
                for _ in 0..m {
                    target.extend_from_slice(text.row(y));
                }
            }
            let tv = tape.constant(Tensor::new(vec![b * m, dt], target)?);
            let cos = tape.mul(p, tv)?;
            let cos = tape.sum(cos);
            let align = tape.scale(cos, -opts.align_weight / (b * m) as f64);
            loss = tape.add(loss, align)?;
        }
        let value = tape.value(loss).item() + opts.align_weight;
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        losses.push(value);
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Vec<f64>>> = vars.all().into_iter().map(|v| grads.take_data(v)).collect();
        adam.step(&mut enc.params_mut(), &g, opts.lr);
    }

    let train_accuracy = if opts.eval_per_class > 0 {
        let labels: Vec<usize> = all.iter().flat_map(|&c| std::iter::repeat(c).take(opts.eval_per_class)).collect();
        let mut correct = 0;
        // Batched so large class counts do not hold every activation at once.
        for chunk in labels.chunks(opts.batch_size) {
            let set = sample_images(source, &all, chunk, 0, &mut rng)?;
            let (f, _) = enc.forward(&set.images, &[], None)?;
            let pred = argmax_rows(&similarity_logits(&f, &text, opts.tau)?);
            correct += pred.iter().zip(chunk).filter(|(a, b)| a == b).count();
        }
        correct as f64 / labels.len() as f64
    } else {
        0.0
    };
    Ok(PretrainReport { losses, train_accuracy, seed: opts.seed })
}

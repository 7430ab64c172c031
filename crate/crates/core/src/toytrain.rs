//! Synthetic four-template image task and an AdamW training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{domain, Result};
use crate::tensor::{BnMode, Scalar, Tape, Tensor};
use crate::vigblocks::{GrapherKind, Model, ModelConfig};

pub const SIDE: usize = 32;
const PIXELS: usize = SIDE * SIDE;

/// Class templates, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    HorizontalBar,
    VerticalBar,
    Square,
    DiagonalStripe,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::HorizontalBar,
        Template::VerticalBar,
        Template::Square,
        Template::DiagonalStripe,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// `(n, 3, 32, 32)` row-major, values in `[0, 1]`.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * 3 * PIXELS..(i + 1) * 3 * PIXELS]
    }

    /// Stacks the samples at `idx` into a batch tensor.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let data = idx
            .iter()
            .flat_map(|&i| self.image(i).iter().map(|&v| T::lit(v)))
            .collect();
        Tensor::from_vec([idx.len(), 3, SIDE, SIDE], data).expect("batch shape")
    }
}

/// Binary mask of one template with its random placement drawn from `rng`.
pub fn render(template: Template, rng: &mut impl Rng) -> Vec<f64> {
    let mut m = vec![0.0; PIXELS];
    let mut set = |r: usize, c: usize| m[r * SIDE + c] = 1.0;
    match template {
        Template::HorizontalBar => {
            let thick = rng.gen_range(3..=5);
            let r0 = rng.gen_range(0..=SIDE - thick);
            for r in r0..r0 + thick {
                (0..SIDE).for_each(|c| set(r, c));
            }
        }
        Template::VerticalBar => {
            let thick = rng.gen_range(3..=5);
            let c0 = rng.gen_range(0..=SIDE - thick);
            for r in 0..SIDE {
                (c0..c0 + thick).for_each(|c| set(r, c));
            }
        }
        Template::Square => {
            let s = rng.gen_range(8..=14);
            let (r0, c0) = (rng.gen_range(0..=SIDE - s), rng.gen_range(0..=SIDE - s));
            for r in r0..r0 + s {
                (c0..c0 + s).for_each(|c| set(r, c));
            }
        }
        Template::DiagonalStripe => {
            let width = rng.gen_range(3..=5);
            let shift = rng.gen_range(0..SIDE);
            for r in 0..SIDE {
                for c in 0..SIDE {
                    if (c + SIDE - r + shift) % SIDE < width {
                        set(r, c);
                    }
                }
            }
        }
    }
    m
}

/// Seeded dataset with `n_samples` images over `classes` (2 or 4) templates.
/// Labels cycle through the classes, so counts differ by at most one.
pub fn gen_dataset(seed: u64, n_samples: usize, classes: usize) -> Result<ToyDataset> {
    gen_dataset_with_noise(seed, n_samples, classes, 0.1)
}

pub fn gen_dataset_with_noise(seed: u64, n_samples: usize, classes: usize, sigma: f64) -> Result<ToyDataset> {
    if classes != 2 && classes != 4 {
        return Err(domain(format!("unsupported class count {classes}; use 2 or 4")));
    }
    if n_samples < classes {
        return Err(domain(format!("need at least {classes} samples, got {n_samples}")));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_samples * 3 * PIXELS);
    let labels: Vec<usize> = (0..n_samples).map(|i| i % classes).collect();
    for &label in &labels {
        let mask = render(Template::ALL[label], &mut rng);
        for _ in 0..3 {
            images.extend(mask.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        }
    }
    Ok(ToyDataset {
        images,
        labels,
        classes,
        seed,
    })
}

/// Hand-written classifier over mean row/column profiles of channel 0.
pub fn profile_classify(image: &[f64]) -> usize {
    let px = &image[..PIXELS];
    let rows: Vec<f64> = (0..SIDE).map(|r| px[r * SIDE..(r + 1) * SIDE].iter().sum::<f64>() / SIDE as f64).collect();
    let cols: Vec<f64> = (0..SIDE).map(|c| (0..SIDE).map(|r| px[r * SIDE + c]).sum::<f64>() / SIDE as f64).collect();
    let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
    if max(&rows) > 0.99 {
        0
    } else if max(&cols) > 0.99 {
        1
    } else if min(&rows) > 0.0 && min(&cols) > 0.0 {
        3
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn step(&mut self, opt: &AdamW, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        self.t += 1;
        let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, wd, eps) = (T::lit(opt.lr), T::lit(opt.weight_decay), T::lit(opt.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = *p - lr * (update + wd * *p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamW,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 32,
            optimizer: AdamW::default(),
            seed: 0,
        }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn check_classes<T: Scalar>(model: &Model<T>, data: &ToyDataset) -> Result<()> {
    if model.config.num_classes != data.classes {
        return Err(domain(format!(
            "model has {} classes, dataset has {}",
            model.config.num_classes, data.classes
        )));
    }
    Ok(())
}

/// Trains in place; minibatches are drawn by reshuffling the dataset each
/// epoch with a generator seeded from `cfg.seed`.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &ToyDataset, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    check_classes(model, data)?;
    if cfg.batch == 0 {
        return Err(domain("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut adam = AdamState::new(&model.params.tensors);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let take = (cfg.batch - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let x = data.batch::<T>(&idx);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, BnMode::Train, true)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let logits = tape.value(out.logits).data();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(n, &l)| argmax(&logits[n * data.classes..(n + 1) * data.classes]) == l)
            .count();
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        tape.backward(loss)?;
        let grads = model.collect_grads(&tape, &out);
        adam.step(&cfg.optimizer, &mut model.params.tensors, &grads);
        log.push(LogRow {
            step,
            loss: loss_value,
            train_acc: correct as f64 / cfg.batch as f64,
        });
    }
    Ok(log)
}

/// Eval-mode accuracy over the whole dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &ToyDataset) -> Result<f64> {
    check_classes(model, data)?;
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let mut tape = Tape::new();
        let out = model.forward_eval(&mut tape, &data.batch::<T>(chunk))?;
        let logits = tape.value(out.logits).data();
        correct += chunk
            .iter()
            .enumerate()
            .filter(|&(n, &i)| argmax(&logits[n * data.classes..(n + 1) * data.classes]) == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn log_to_csv(log: &[LogRow]) -> String {
    let mut s = String::from("step,loss,train_acc\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.train_acc));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub final_acc: f64,
    pub steps: usize,
    pub seed: u64,
    pub heldout_acc: f64,
    pub final_loss: f64,
}

/// Everything one toy run produces.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub log: Vec<LogRow>,
    pub metrics: FinalMetrics,
    pub params: usize,
}

/// Builds a model from `config`, trains on 512 samples drawn from `seed` and
/// evaluates on the training set and on 512 held-out samples.
pub fn run_toy<T: Scalar>(config: ModelConfig, cfg: &TrainConfig, n_samples: usize) -> Result<ToyRun> {
    let train_set = gen_dataset(cfg.seed, n_samples, config.num_classes)?;
    let heldout = gen_dataset(cfg.seed.wrapping_add(1_000_003), n_samples, config.num_classes)?;
    let mut model = Model::<T>::new(config, cfg.seed)?;
    let log = train(&mut model, &train_set, cfg)?;
    let metrics = FinalMetrics {
        final_acc: evaluate(&model, &train_set)?,
        steps: cfg.steps,
        seed: cfg.seed,
        heldout_acc: evaluate(&model, &heldout)?,
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
    };
    Ok(ToyRun {
        log,
        metrics,
        params: model.count_params(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub grapher: GrapherKind,
    pub use_hrs: bool,
    pub params: usize,
    pub final_loss: f64,
    pub final_acc: f64,
    pub heldout_acc: f64,
}

/// Same training run for every combination of grapher kind and HRS switch.
pub fn ablation<T: Scalar>(base: &ModelConfig, cfg: &TrainConfig, n_samples: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for grapher in [GrapherKind::Lsgc, GrapherKind::Svga] {
        for use_hrs in [true, false] {
            let config = base.clone().with_grapher(grapher).with_hrs(use_hrs);
            let run = run_toy::<T>(config, cfg, n_samples)?;
            rows.push(AblationRow {
                grapher,
                use_hrs,
                params: run.params,
                final_loss: run.metrics.final_loss,
                final_acc: run.metrics.final_acc,
                heldout_acc: run.metrics.heldout_acc,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("grapher,use_hrs,params,final_loss,final_acc,heldout_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.grapher, r.use_hrs, r.params, r.final_loss, r.final_acc, r.heldout_acc
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_dataset(0, 37, 4).unwrap();
        let b = gen_dataset(0, 37, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, gen_dataset(1, 37, 4).unwrap().images);
        let mut hist = [0usize; 4];
        a.labels.iter().for_each(|&l| hist[l] += 1);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn domain_errors() {
        assert!(gen_dataset(0, 10, 3).is_err());
        assert!(gen_dataset(0, 3, 4).is_err());
        let data = gen_dataset(0, 8, 2).unwrap();
        let mut m = Model::<f64>::new(ModelConfig::micro(), 0).unwrap();
        assert!(train(&mut m, &data, &TrainConfig::default()).is_err());
        assert!(evaluate(&m, &data).is_err());
    }

    #[test]
    fn profile_oracle_is_perfect_without_noise() {
        let data = gen_dataset_with_noise(3, 400, 4, 0.0).unwrap();
        for i in 0..data.len() {
            assert_eq!(profile_classify(data.image(i)), data.labels[i], "sample {i}");
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_f64([1, 1, 1, 2], &[1.0, -2.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let opt = AdamW::default();
        st.step(&opt, &mut p, &[vec![0.5, -3.0]]);
        // bias-corrected first step is sign(g) * lr, plus decay lr * wd * p
        let want = [1.0 - 1e-3 - 1e-5, -2.0 + 1e-3 + 2e-5];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn initial_loss_near_log_classes_and_log_is_deterministic() {
        let data = gen_dataset(0, 64, 4).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch: 16,
            ..TrainConfig::default()
        };
        let run = |s| {
            let mut m = Model::<f64>::new(ModelConfig::micro(), s).unwrap();
            train(&mut m, &data, &cfg).unwrap()
        };
        let a = run(0);
        assert!((a[0].loss - 4f64.ln()).abs() < 0.3, "{}", a[0].loss);
        assert_eq!(a, run(0));
        assert!(log_to_csv(&a).starts_with("step,loss,train_acc\n0,"));
    }
}

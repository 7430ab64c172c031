use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{domain, shape, Result};
use crate::tensor::{rel_err_floor, BnMode, GradCheckReport, RunningStats, Scalar, Tape, Tensor, Var};

use super::blocks::{
    BlockTrace, Builder, Ctx, Downsample, Ffn, Grapher, Head, Hrs, LsgcBlock, MbConv, Merge, ParamStore, Stem,
};
use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub struct Stage {
    pub mbconvs: Vec<MbConv>,
    pub lsgc_blocks: Vec<LsgcBlock>,
}

/// Assembled LogViG network with its parameters and BN running state.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stats: Vec<RunningStats<T>>,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub downsamples: Vec<Downsample>,
    pub shortcut: Option<(Hrs, Merge)>,
    pub head: Head,
}

/// Vars and accounting from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub stem: Var,
    pub stage_outputs: Vec<Var>,
    pub hrs: Option<Var>,
    pub merged: Option<Var>,
    /// One tape leaf per entry of the parameter store, in store order.
    pub params: Vec<Var>,
    pub trace: Vec<BlockTrace>,
    pub macs: u64,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            rng: &mut rng,
        };
        let ch = config.stage_channels;
        let stem = Stem::new(&mut b, ch[0]);
        let mut stages = Vec::with_capacity(4);
        let mut downsamples = Vec::with_capacity(3);
        for s in 0..4 {
            let c = ch[s];
            let mbconvs = (0..config.stage_depths[s].mbconv)
                .map(|i| MbConv::new(&mut b, &format!("stage{}.mbconv{i}", s + 1), c, c, config.mbconv_expansion))
                .collect();
            let lsgc_blocks = (0..config.graphers_in_stage(s))
                .map(|i| {
                    let name = format!("stage{}.lsgc{i}", s + 1);
                    LsgcBlock {
                        grapher: Grapher::new(
                            &mut b,
                            &format!("{name}.grapher"),
                            c,
                            config.grapher_kind,
                            config.expansion_rate,
                            config.relative_sign,
                        ),
                        ffn: Ffn::new(&mut b, &format!("{name}.ffn"), c, config.ffn_ratio),
                    }
                })
                .collect();
            stages.push(Stage { mbconvs, lsgc_blocks });
            if s < 3 {
                downsamples.push(Downsample::new(&mut b, &format!("down{}", s + 1), c, ch[s + 1]));
            }
        }
        let shortcut = config
            .use_hrs
            .then(|| (Hrs::new(&mut b, ch[0], ch[1]), Merge::new(&mut b, ch[3], ch[1])));
        let head = Head::new(&mut b, ch[3], config.head_hidden, config.num_classes);
        Ok(Self {
            config,
            params,
            stats,
            stem,
            stages,
            downsamples,
            shortcut,
            head,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn mbconv_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.mbconvs.len()).collect()
    }

    pub fn grapher_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.lsgc_blocks.len()).collect()
    }

    /// Forward pass; train mode updates BN running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: BnMode, track_grads: bool) -> Result<ForwardOutput> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.run(tape, x, mode, track_grads, &mut stats);
        self.stats = stats;
        out
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<ForwardOutput> {
        let mut stats = self.stats.clone();
        self.run(tape, x, BnMode::Eval, false, &mut stats)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        track_grads: bool,
        stats: &mut [RunningStats<T>],
    ) -> Result<ForwardOutput> {
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(shape("forward", format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(domain(format!("input {h}x{w} is not divisible by 32")));
        }
        let params: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), track_grads))
            .collect();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx {
            tape,
            vars: &params,
            stats,
            mode,
            momentum: self.config.bn_momentum,
            eps: self.config.bn_eps,
            macs: 0,
        };
        let mut trace = Vec::new();
        let mut mark = |ctx: &Ctx<'_, T>, name: String, v: Var, before: u64| {
            trace.push(BlockTrace {
                name,
                output_shape: ctx.shape(v),
                macs: ctx.macs - before,
            });
        };

        let stem = self.stem.forward(&mut ctx, xv)?;
        mark(&ctx, "stem".into(), stem, 0);
        let mut y = stem;
        let mut stage_outputs = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                let before = ctx.macs;
                y = self.downsamples[s - 1].forward(&mut ctx, y)?;
                mark(&ctx, format!("down{s}"), y, before);
            }
            for (i, m) in stage.mbconvs.iter().enumerate() {
                let before = ctx.macs;
                y = m.forward(&mut ctx, y)?;
                mark(&ctx, format!("stage{}.mbconv{i}", s + 1), y, before);
            }
            for (i, blk) in stage.lsgc_blocks.iter().enumerate() {
                let before = ctx.macs;
                y = blk.grapher.forward(&mut ctx, y)?;
                mark(&ctx, format!("stage{}.lsgc{i}.grapher", s + 1), y, before);
                let before = ctx.macs;
                y = blk.ffn.forward(&mut ctx, y)?;
                mark(&ctx, format!("stage{}.lsgc{i}.ffn", s + 1), y, before);
            }
            stage_outputs.push(y);
        }
        let (mut hrs, mut merged) = (None, None);
        if let Some((shortcut, merge)) = &self.shortcut {
            let before = ctx.macs;
            let hv = shortcut.forward(&mut ctx, stem)?;
            mark(&ctx, "hrs".into(), hv, before);
            let before = ctx.macs;
            let mv = merge.forward(&mut ctx, hv, y)?;
            mark(&ctx, "merge".into(), mv, before);
            hrs = Some(hv);
            merged = Some(mv);
            y = mv;
        }
        let before = ctx.macs;
        let logits = self.head.forward(&mut ctx, y)?;
        mark(&ctx, "head".into(), logits, before);
        let macs = ctx.macs;
        Ok(ForwardOutput {
            logits,
            stem,
            stage_outputs,
            hrs,
            merged,
            params,
            trace,
            macs,
        })
    }

    /// Copies accumulated leaf gradients out of `tape`, zeros where none.
    pub fn collect_grads(&self, tape: &Tape<T>, out: &ForwardOutput) -> Vec<Vec<T>> {
        out.params
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
            .collect()
    }

    /// Softmax cross-entropy of the model on `(x, labels)`. BN state is taken
    /// from and written to `stats`.
    pub fn loss_with_stats(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        labels: &[usize],
        mode: BnMode,
        track_grads: bool,
        stats: &mut [RunningStats<T>],
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.run(tape, x, mode, track_grads, stats)?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }
}

/// Multiply-accumulates of one forward pass at `input_shape`, in billions.
pub fn count_gmacs<T: Scalar>(model: &Model<T>, input_shape: [usize; 4]) -> Result<f64> {
    let x = Tensor::zeros(input_shape);
    let mut tape = Tape::new();
    let out = model.forward_eval(&mut tape, &x)?;
    Ok(out.macs as f64 / 1e9)
}

/// Gradients smaller than this are compared absolutely. Biases feeding a
/// train-mode BN have an exact zero gradient, and the central difference of
/// an O(1) loss at `eps = 1e-5` carries round-off around 1e-10.
pub const MODEL_GRAD_FLOOR: f64 = 1e-6;

/// Reverse-mode parameter gradients of the training loss versus central
/// differences on `samples` randomly chosen scalar parameters.
pub fn param_grad_check(
    model: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let loss_at = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut stats = m.stats.clone();
        let (loss, _) = m.loss_with_stats(&mut tape, x, labels, BnMode::Train, false, &mut stats)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let mut stats = model.stats.clone();
    let (loss, out) = model.loss_with_stats(&mut tape, x, labels, BnMode::Train, true, &mut stats)?;
    tape.backward(loss)?;
    let grads = model.collect_grads(&tape, &out);

    // flat index -> (tensor, coordinate)
    let offsets: Vec<usize> = model
        .params
        .tensors
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total = model.count_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in sample(&mut rng, total, samples.min(total)).into_vec() {
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[ti];
        let orig = probe.params.tensors[ti].data()[ci];
        probe.params.tensors[ti].data_mut()[ci] = orig + eps;
        let up = loss_at(&probe)?;
        probe.params.tensors[ti].data_mut()[ci] = orig - eps;
        let down = loss_at(&probe)?;
        probe.params.tensors[ti].data_mut()[ci] = orig;
        let err = rel_err_floor(grads[ti][ci], (up - down) / (2.0 * eps), MODEL_GRAD_FLOOR);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((ti, ci));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub mbconv: usize,
    pub grapher: usize,
    pub channels: usize,
    pub resolution: usize,
}

/// Parameter/MAC report for a built model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub variant: String,
    pub params: usize,
    pub gmacs: f64,
    pub per_stage: Vec<StageSummary>,
    pub decisions: BTreeMap<String, String>,
    pub blocks: Vec<BlockSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockSummary {
    pub name: String,
    pub output_shape: [usize; 4],
    pub params: usize,
    pub macs: u64,
}

fn decisions(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut d = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        d.insert(k.to_string(), v);
    };
    put("grapher_kind", cfg.grapher_kind.to_string());
    put("expansion_rate", cfg.expansion_rate.to_string());
    put(
        "grapher_stages",
        cfg.grapher_stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    put("use_hrs", cfg.use_hrs.to_string());
    put("mrconv_final_conv", "1x1, 2C -> C".into());
    put("relative_sign", format!("{:?}", cfg.relative_sign));
    put("hrs_width", "C2 (stage-2 channels); merge C4 -> C2 -> C4".into());
    put("head", format!("avgpool -> 1x1 conv to {} + GeLU -> linear", cfg.head_hidden));
    put("mbconv_expansion", cfg.mbconv_expansion.to_string());
    put("ffn_ratio", cfg.ffn_ratio.to_string());
    put("conv_bias", "all convolutions carry a bias".into());
    put("stage_placement", "grapher blocks outside grapher_stages are removed".into());
    put("macs", "conv + linear multiply-accumulates, batch 1".into());
    d
}

/// Builds the summary by running one eval forward pass at batch 1.
pub fn summarize<T: Scalar>(model: &Model<T>) -> Result<ModelSummary> {
    let r = model.config.input_resolution;
    let mut tape = Tape::new();
    let out = model.forward_eval(&mut tape, &Tensor::zeros([1, 3, r, r]))?;
    let per_stage = (0..4)
        .map(|s| StageSummary {
            mbconv: model.stages[s].mbconvs.len(),
            grapher: model.stages[s].lsgc_blocks.len(),
            channels: model.config.stage_channels[s],
            resolution: tape.shape(out.stage_outputs[s])[2],
        })
        .collect();
    let blocks = out
        .trace
        .iter()
        .map(|b| BlockSummary {
            name: b.name.clone(),
            output_shape: b.output_shape,
            params: block_params(model, &b.name),
            macs: b.macs,
        })
        .collect();
    Ok(ModelSummary {
        variant: model.config.variant.to_string(),
        params: model.count_params(),
        gmacs: out.macs as f64 / 1e9,
        per_stage,
        decisions: decisions(&model.config),
        blocks,
    })
}

fn block_params<T: Scalar>(model: &Model<T>, block: &str) -> usize {
    let prefix = format!("{block}.");
    model
        .params
        .names
        .iter()
        .zip(&model.params.tensors)
        .filter(|(n, _)| {
            n.starts_with(&prefix) || (block == "merge" && n.starts_with("merge.")) || (block == "hrs" && n.starts_with("hrs."))
        })
        .map(|(_, t)| t.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vigblocks::config::GrapherKind;

    #[test]
    fn micro_forward_shapes() {
        let mut m = Model::<f64>::new(ModelConfig::micro(), 0).unwrap();
        let x = Tensor::randn([2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &x, BnMode::Train, false).unwrap();
        assert_eq!(tape.shape(out.logits), [2, 4, 1, 1]);
        let sides: Vec<usize> = out.stage_outputs.iter().map(|&v| tape.shape(v)[2]).collect();
        assert_eq!(sides, vec![8, 4, 2, 1]);
        assert_eq!(tape.shape(out.hrs.unwrap()), [2, 16, 4, 4]);
        assert_eq!(tape.shape(out.merged.unwrap()), [2, 32, 4, 4]);
    }

    #[test]
    fn forward_rejects_bad_resolution() {
        let mut m = Model::<f64>::new(ModelConfig::micro(), 0).unwrap();
        let mut tape = Tape::new();
        assert!(m.forward(&mut tape, &Tensor::zeros([1, 3, 40, 40]), BnMode::Eval, false).is_err());
        assert!(m.forward(&mut tape, &Tensor::zeros([1, 1, 32, 32]), BnMode::Eval, false).is_err());
    }

    #[test]
    fn forward_never_changes_params_and_eval_keeps_stats() {
        let mut m = Model::<f64>::new(ModelConfig::micro(), 7).unwrap();
        let params = m.params.tensors.clone();
        let stats = m.stats.clone();
        let x = Tensor::randn([2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(2));
        m.forward(&mut Tape::new(), &x, BnMode::Eval, false).unwrap();
        assert_eq!(m.stats, stats);
        m.forward(&mut Tape::new(), &x, BnMode::Train, true).unwrap();
        assert_ne!(m.stats, stats);
        assert_eq!(m.params.tensors, params);
    }

    #[test]
    fn no_hrs_feeds_head_from_stage_four() {
        let mut m = Model::<f64>::new(ModelConfig::micro().with_hrs(false), 0).unwrap();
        assert!(m.shortcut.is_none());
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &Tensor::zeros([1, 3, 32, 32]), BnMode::Eval, false).unwrap();
        assert!(out.hrs.is_none() && out.merged.is_none());
        assert_eq!(tape.shape(out.logits), [1, 4, 1, 1]);
        let with = Model::<f64>::new(ModelConfig::micro(), 0).unwrap();
        assert!(with.count_params() > m.count_params());
    }

    #[test]
    fn stage_placement_removes_graphers() {
        let one = Model::<f32>::new(ModelConfig::micro().with_grapher_stages([4]), 0).unwrap();
        assert_eq!(one.grapher_counts(), vec![0, 0, 0, 1]);
        assert_eq!(one.mbconv_counts(), vec![1, 1, 1, 1]);
        let svga = Model::<f32>::new(ModelConfig::micro().with_grapher(GrapherKind::Svga), 0).unwrap();
        let lsgc = Model::<f32>::new(ModelConfig::micro(), 0).unwrap();
        assert_eq!(svga.count_params(), lsgc.count_params());
    }

    #[test]
    fn single_conv_mac_formula() {
        // 3 -> 32, 3x3, stride 2 on 224x224: 3*32*9*112*112
        assert_eq!(3 * 32 * 9 * 112 * 112, 10_838_016);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f64>::new(ModelConfig::micro(), 11).unwrap();
        let b = Model::<f64>::new(ModelConfig::micro(), 11).unwrap();
        let c = Model::<f64>::new(ModelConfig::micro(), 12).unwrap();
        assert_eq!(a.params.tensors, b.params.tensors);
        assert_ne!(a.params.tensors, c.params.tensors);
    }
}

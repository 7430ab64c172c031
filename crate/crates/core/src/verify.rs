//! Property suites shared by the `verify` command and the test targets.
//!
//! * `oracle`: shift-based folds against an adjacency-list brute force.
//! * `gradcheck`: every tape primitive and the Micro model against central
//!   differences.
//! * `equivariance`: the LSGC max-relative conv commutes with torus shifts.
//! * `shapes`: stage, shortcut and logit shapes of the Ti and Micro models.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::graphkit::{build_lsgc_adjacency, build_svga_adjacency, Adjacency};
use crate::tensor::{
    grad_check, Axis, BnMode, Conv2dSpec, GradCheckOptions, RunningStats, Tape, Tensor, Var,
};
use crate::vigblocks::{mrconv_lsgc, mrconv_svga, param_grad_check, GrapherKind, Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Oracle,
    Gradcheck,
    Equivariance,
    Shapes,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Oracle, Suite::Gradcheck, Suite::Equivariance, Suite::Shapes];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oracle" => Ok(Suite::Oracle),
            "gradcheck" => Ok(Suite::Gradcheck),
            "equivariance" => Ok(Suite::Equivariance),
            "shapes" => Ok(Suite::Shapes),
            other => Err(domain(format!("unknown suite '{other}'"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Oracle => "oracle",
            Suite::Gradcheck => "gradcheck",
            Suite::Equivariance => "equivariance",
            Suite::Shapes => "shapes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn pass_count(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Oracle => oracle_suite(200, seed)?,
        Suite::Gradcheck => gradcheck_suite(&[seed, seed + 1, seed + 2])?,
        Suite::Equivariance => equivariance_suite(50, seed)?,
        Suite::Shapes => shapes_suite()?,
    };
    Ok(SuiteReport { suite, checks })
}

/// Fold computed pixel by pixel from an adjacency list: for each node,
/// `max(0, max_q (x_p - x_q))` over its neighbors `q`.
pub fn brute_force_fold(x: &Tensor<f64>, adj: &Adjacency) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                let xp = x.at(b, ch, p / w, p % w);
                let mut acc = 0.0f64;
                for &q in &adj.neighbors[p] {
                    acc = (xp - x.at(b, ch, q / w, q % w)).max(acc);
                }
                let o = out.offset(b, ch, p / w, p % w);
                out.data_mut()[o] = acc;
            }
        }
    }
    out
}

/// One randomized oracle case: returns `(description, matched)`.
pub fn oracle_case(kind: GrapherKind, rng: &mut ChaCha8Rng) -> Result<(String, bool)> {
    let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let k = rng.gen_range(2..=4);
    let mut x = Tensor::<f64>::randn([n, c, h, w], rng);
    if rng.gen_bool(0.3) {
        // coarse values force ties
        x = x.map(|v| (v * 2.0).round() + 0.0);
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(Tensor::randn([c, 2 * c, 1, 1], rng));
    let (fold, adj) = match kind {
        GrapherKind::Lsgc => (mrconv_lsgc(&mut tape, xv, k, wv, None)?, build_lsgc_adjacency(h, w, k)?),
        GrapherKind::Svga => (mrconv_svga(&mut tape, xv, k, wv, None)?, build_svga_adjacency(h, w, k)?),
    };
    let want = brute_force_fold(&x, &adj);
    let got = tape.value(fold.folded);
    let same = got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((format!("{kind} n={n} c={c} {h}x{w} k={k}"), same))
}

pub fn oracle_suite(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for kind in [GrapherKind::Lsgc, GrapherKind::Svga] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        for i in 0..cases {
            let (desc, ok) = oracle_case(kind, &mut rng)?;
            if !ok {
                failures.push(format!("case {i}: {desc}"));
            }
        }
        checks.push(Check {
            name: format!("mrconv_{kind} vs brute force"),
            passed: failures.is_empty(),
            detail: format!("{}/{cases} bit-exact{}", cases - failures.len(), fmt_failures(&failures)),
        });
    }
    Ok(checks)
}

fn fmt_failures(f: &[String]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; first failure {}", f[0])
    }
}

/// Relative error bound for primitive gradients.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Relative error bound for sampled model-parameter gradients.
pub const MODEL_TOL: f64 = 1e-3;

type Primitive = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct PrimitiveCase {
    name: &'static str,
    shapes: Vec<[usize; 4]>,
    f: Primitive,
    /// Skips coordinates within `eps` of a max kink.
    near_tie: bool,
}

/// Contracts an arbitrary output against a fixed random weight so every
/// output coordinate contributes with a distinct factor.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let [_, c, h, w] = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = tape.constant(Tensor::randn([1, c * h * w, 1, 1], &mut rng));
    let z = tape.linear(y, r, None)?;
    Ok(tape.sum(z))
}

fn bn_train(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    let c = tape.shape(v[0])[1];
    let mut stats = RunningStats::new(c);
    tape.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train, 0.1, 1e-5)
}

fn bn_eval(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    let c = tape.shape(v[0])[1];
    let mut stats = RunningStats::new(c);
    stats.mean = (0..c).map(|i| 0.1 * i as f64).collect();
    stats.var = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
    tape.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Eval, 0.1, 1e-5)
}

fn primitive_cases() -> Vec<PrimitiveCase> {
    macro_rules! case {
        ($name:expr, [$($s:expr),*], $tie:expr, $f:expr) => {
            PrimitiveCase { name: $name, shapes: vec![$($s),*], f: $f, near_tie: $tie }
        };
    }
    vec![
        case!("conv2d", [[2, 3, 5, 5], [4, 3, 3, 3], [1, 4, 1, 1]], false, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 1, 1))?;
            project(t, y)
        }),
        case!("conv2d_stride2", [[1, 2, 6, 7], [3, 2, 3, 3]], false, |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dSpec::new(2, 1, 1))?;
            project(t, y)
        }),
        case!("conv2d_depthwise", [[2, 4, 5, 4], [4, 1, 3, 3], [1, 4, 1, 1]], false, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 1, 4))?;
            project(t, y)
        }),
        case!("conv2d_pointwise", [[2, 3, 4, 4], [5, 3, 1, 1]], false, |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dSpec::default())?;
            project(t, y)
        }),
        case!("batchnorm_train", [[3, 2, 3, 3], [1, 2, 1, 1], [1, 2, 1, 1]], false, |t, v| {
            let y = bn_train(t, v)?;
            project(t, y)
        }),
        case!("batchnorm_eval", [[2, 3, 2, 2], [1, 3, 1, 1], [1, 3, 1, 1]], false, |t, v| {
            let y = bn_eval(t, v)?;
            project(t, y)
        }),
        case!("gelu", [[2, 3, 3, 3]], false, |t, v| {
            let y = t.gelu(v[0]);
            project(t, y)
        }),
        case!("add", [[2, 2, 3, 3], [2, 2, 3, 3]], false, |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        case!("sub", [[2, 2, 3, 3], [2, 2, 3, 3]], false, |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        case!("max", [[2, 2, 3, 3], [2, 2, 3, 3]], true, |t, v| {
            let y = t.max(v[0], v[1])?;
            project(t, y)
        }),
        case!("concat_channels", [[2, 2, 3, 3], [2, 3, 3, 3]], false, |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y)
        }),
        case!("linear", [[3, 2, 2, 2], [5, 8, 1, 1], [1, 5, 1, 1]], false, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y)
        }),
        case!("circular_shift", [[2, 2, 4, 5]], false, |t, v| {
            let a = t.circular_shift(v[0], Axis::H, 3);
            let y = t.circular_shift(a, Axis::W, -2);
            project(t, y)
        }),
        case!("bilinear_upsample", [[2, 2, 3, 4]], false, |t, v| {
            let y = t.bilinear_upsample(v[0], 7, 8)?;
            project(t, y)
        }),
        case!("global_avg_pool", [[2, 3, 4, 3]], false, |t, v| {
            let y = t.global_avg_pool(v[0]);
            project(t, y)
        }),
        case!("softmax_cross_entropy", [[3, 4, 1, 1]], false, |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1])),
        case!("sum", [[2, 3, 2, 2]], false, |t, v| Ok(t.sum(v[0]))),
        case!("scale", [[2, 3, 2, 2]], false, |t, v| {
            let y = t.scale(v[0], -1.75);
            project(t, y)
        }),
    ]
}

/// Largest primitive gradient error per primitive over `seeds`.
pub fn primitive_grad_errors(seeds: &[u64]) -> Result<Vec<(String, f64, usize)>> {
    let opts_eps = GradCheckOptions::default().eps;
    let mut rows = Vec::new();
    for case in primitive_cases() {
        let (mut worst, mut checked) = (0.0f64, 0);
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|&s| Tensor::randn(s, &mut rng)).collect();
            let opts = GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            };
            let keep = |_: usize, coord: usize, xs: &[Tensor<f64>]| {
                !case.near_tie || (xs[0].data()[coord] - xs[1].data()[coord]).abs() > 4.0 * opts_eps
            };
            let r = grad_check(case.f, &inputs, &opts, keep)?;
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
        }
        rows.push((case.name.to_string(), worst, checked));
    }
    Ok(rows)
}

pub fn gradcheck_suite(seeds: &[u64]) -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = primitive_grad_errors(seeds)?
        .into_iter()
        .map(|(name, err, n)| Check {
            passed: err < PRIMITIVE_TOL,
            detail: format!("max rel err {err:.2e} over {n} coords"),
            name,
        })
        .collect();
    let seed = seeds.first().copied().unwrap_or(0);
    let r = micro_param_grad_check(seed)?;
    checks.push(Check {
        name: "micro model parameters".into(),
        passed: r.max_rel_err < MODEL_TOL,
        detail: format!("max rel err {:.2e} over {} sampled parameters", r.max_rel_err, r.checked),
    });
    Ok(checks)
}

/// 50 sampled parameters of a fresh Micro model on a 4-image batch.
pub fn micro_param_grad_check(seed: u64) -> Result<crate::tensor::GradCheckReport> {
    let model = Model::<f64>::new(ModelConfig::micro(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let x = Tensor::randn([4, 3, 32, 32], &mut rng);
    param_grad_check(&model, &x, &[0, 1, 2, 3], 50, 1e-5, seed)
}

/// One translation case: `mrconv_lsgc(roll(x)) == roll(mrconv_lsgc(x))` on
/// both the fold and the conv output, compared bitwise.
pub fn equivariance_case(rng: &mut ChaCha8Rng) -> Result<(String, bool)> {
    let (h, w) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let k = rng.gen_range(2..=3);
    let (dh, dw) = (rng.gen_range(-(h as isize)..=h as isize), rng.gen_range(-(w as isize)..=w as isize));
    let x = Tensor::<f64>::randn([n, c, h, w], rng);
    let weight = Tensor::randn([c, 2 * c, 1, 1], rng);
    let bias = Tensor::randn([1, c, 1, 1], rng);
    let roll = |t: &Tensor<f64>| t.circular_shift(Axis::H, dh).circular_shift(Axis::W, dw);
    let apply = |input: Tensor<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(input);
        let wv = tape.constant(weight.clone());
        let bv = tape.constant(bias.clone());
        let o = mrconv_lsgc(&mut tape, xv, k, wv, Some(bv))?;
        Ok((tape.value(o.folded).clone(), tape.value(o.out).clone()))
    };
    let (f1, o1) = apply(roll(&x))?;
    let (f0, o0) = apply(x)?;
    let bits = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let ok = bits(&f1, &roll(&f0)) && bits(&o1, &roll(&o0));
    Ok((format!("n={n} c={c} {h}x{w} k={k} shift=({dh},{dw})"), ok))
}

pub fn equivariance_suite(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..cases {
        let (desc, ok) = equivariance_case(&mut rng)?;
        if !ok {
            failures.push(format!("case {i}: {desc}"));
        }
    }
    Ok(vec![Check {
        name: "mrconv_lsgc commutes with torus shifts".into(),
        passed: failures.is_empty(),
        detail: format!("{}/{cases} bit-exact{}", cases - failures.len(), fmt_failures(&failures)),
    }])
}

/// Shapes observed for one eval forward pass at batch 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeTrace {
    pub stages: Vec<[usize; 4]>,
    pub hrs: Option<[usize; 4]>,
    pub logits: [usize; 4],
}

pub fn shape_trace(config: ModelConfig) -> Result<ShapeTrace> {
    let r = config.input_resolution;
    let model = Model::<f64>::new(config, 0)?;
    let mut tape = Tape::new();
    let out = model.forward_eval(&mut tape, &Tensor::zeros([1, 3, r, r]))?;
    Ok(ShapeTrace {
        stages: out.stage_outputs.iter().map(|&v| tape.shape(v)).collect(),
        hrs: out.hrs.map(|v| tape.shape(v)),
        logits: tape.shape(out.logits),
    })
}

pub fn shapes_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for config in [ModelConfig::ti(), ModelConfig::micro()] {
        let name = format!("{} at {}", config.variant, config.input_resolution);
        let r = config.input_resolution;
        let ch = config.stage_channels;
        let want = ShapeTrace {
            stages: (0..4).map(|s| [1, ch[s], r >> (2 + s), r >> (2 + s)]).collect(),
            hrs: Some([1, ch[1], r / 8, r / 8]),
            logits: [1, config.num_classes, 1, 1],
        };
        let got = shape_trace(config)?;
        checks.push(Check {
            name,
            passed: got == want,
            detail: format!("stages {:?}, hrs {:?}, logits {:?}", got.stages, got.hrs, got.logits),
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_cases_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [GrapherKind::Lsgc, GrapherKind::Svga] {
            for _ in 0..20 {
                let (desc, ok) = oracle_case(kind, &mut rng).unwrap();
                assert!(ok, "{desc}");
            }
        }
    }

    #[test]
    fn brute_force_fold_by_hand() {
        let x = Tensor::from_f64([1, 1, 1, 4], &[5.0, 1.0, 2.0, 9.0]).unwrap();
        let adj = build_lsgc_adjacency(1, 4, 2).unwrap();
        assert_eq!(brute_force_fold(&x, &adj).data(), &[4.0, 0.0, 1.0, 7.0]);
    }

    #[test]
    fn equivariance_cases() {
        let checks = equivariance_suite(10, 4).unwrap();
        assert!(checks[0].passed, "{}", checks[0].detail);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("fuzz".parse::<Suite>().is_err());
    }
}

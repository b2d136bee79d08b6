//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cil_core::autodiff::{Tape, Var};
use cil_core::learners::ot::{marginal_residual, sinkhorn};
use cil_core::learners::{gem_project, wa_align, Algorithm};
use cil_core::linalg::{dot, norm};
use cil_core::memory::herding_select;
use cil_core::metrics::{average_accuracy, per_group_accuracy, stage_accuracy};
use cil_core::model::{HeadMode, IncrementalHead};
use cil_core::stream::{Dataset, StreamConfig, TaskStream};
use cil_core::tensor::Tensor;
use cil_lab::runner::{self, RunReport, RESULTS_CSV, RESULTS_JSON};
use cil_lab::{parse_config, ExperimentConfig};
use oracles::{fd_gradient, gem_oracle, herding_oracle, rel_err, sinkhorn_oracle};
use rand::Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> impl Rng {
    cil_core::rng::rng(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

struct MlpGraph {
    x: Tensor,
    targets: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    values: Vec<f64>,
    /// Teacher logits for a distillation term over the first `c - 1` classes.
    distill: Option<Vec<f64>>,
}

impl MlpGraph {
    fn random(seed: u64) -> MlpGraph {
        let mut r = rng(seed);
        loop {
            let n = r.gen_range(1..=6);
            let d = r.gen_range(2..=12);
            let c = r.gen_range(2..=6);
            let depth = r.gen_range(1..=3);
            let mut dims = vec![d];
            dims.extend((0..depth).map(|_| r.gen_range(2..=24)));
            dims.push(c);
            let shapes: Vec<Vec<usize>> = dims
                .windows(2)
                .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
                .collect();
            let count: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            if count > 2000 {
                continue;
            }
            let values = (0..count).map(|_| r.gen_range(-1.0..1.0)).collect();
            let x = Tensor::matrix(n, d, (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
            let targets = (0..n).map(|_| r.gen_range(0..c)).collect();
            let distill = (seed % 2 == 1).then(|| (0..n * (c - 1)).map(|_| r.gen_range(-3.0..3.0)).collect());
            return MlpGraph {
                x,
                targets,
                shapes,
                values,
                distill,
            };
        }
    }

    fn param_count(&self) -> usize {
        self.values.len()
    }

    fn loss(&self, tape: &mut Tape, params: &[Var]) -> Var {
        let mut h = tape.constant(&self.x).unwrap();
        let layers = params.len() / 2;
        for l in 0..layers {
            let z = tape.matmul(h, params[2 * l]).unwrap();
            h = tape.add_bias(z, params[2 * l + 1]).unwrap();
            if l + 1 < layers {
                h = tape.relu(h).unwrap();
            }
        }
        let ce = tape.softmax_cross_entropy(h, &self.targets).unwrap();
        match &self.distill {
            Some(old) => {
                let c = *self.shapes.last().unwrap().first().unwrap();
                let kd = tape.kd_loss(old, c - 1, h, 2.0).unwrap();
                tape.add(ce, kd).unwrap()
            }
            None => ce,
        }
    }

    fn bind(&self, tape: &mut Tape, flat: &[f64]) -> Vec<Var> {
        let mut off = 0;
        self.shapes
            .iter()
            .map(|s| {
                let k: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + k].to_vec()).unwrap();
                off += k;
                tape.param(&t).unwrap()
            })
            .collect()
    }
}

/// Central-difference step. Losses here are O(1..10), so rounding contributes
/// about `1e-15 * |loss| / FD_STEP` to each difference; truncation is
/// `O(FD_STEP^2)`.
const FD_STEP: f64 = 1.0e-4;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut total_params = 0;
    for g in 0..50u64 {
        let graph = MlpGraph::random(1000 + g);
        total_params += graph.param_count();
        let mut tape = Tape::new();
        let params = graph.bind(&mut tape, &graph.values);
        let loss = graph.loss(&mut tape, &params);
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = params.iter().flat_map(|&p| tape.grad_or_zeros(p)).collect();
        let numeric = fd_gradient(
            |x| {
                let mut t = Tape::new();
                let p = graph.bind(&mut t, x);
                let l = graph.loss(&mut t, &p);
                t.value(l).item()
            },
            &graph.values,
            FD_STEP,
        );
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_err(*a, *n, 1e-6);
            worst = worst.max(e);
            ensure(e <= 1e-4, || format!("graph {g} coordinate {i}: {a} vs {n} (rel {e:.2e})"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "50 graphs, {total_params} coordinates, max rel err {worst:.1e}, {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    for case in 0..100 {
        let n = r.gen_range(1..=20);
        let d = r.gen_range(1..=8);
        let m = r.gen_range(1..=n);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let t = Tensor::matrix(n, d, rows.concat()).unwrap();
        let got = herding_select(&t, m).map_err(|e| e.to_string())?;
        let want = herding_oracle(&rows, m);
        ensure(got == want, || format!("case {case} (n={n}, d={d}, m={m}): {got:?} vs {want:?}"))?;
    }
    Ok("100 feature sets, selection order identical to the brute-force greedy".into())
}

// ---------------------------------------------------------------- criterion 3

fn random_vec(r: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(-2.0..2.0)).collect()
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut min_inner = f64::INFINITY;
    let mut track = |x: &[f64], cs: &[Vec<f64>]| {
        for c in cs {
            min_inner = min_inner.min(dot(x, c));
        }
    };

    // (a) already feasible
    for case in 0..100 {
        let d = r.gen_range(2..=8);
        let t = r.gen_range(1..=3);
        let g = random_vec(&mut r, d);
        let cs: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let c = random_vec(&mut r, d);
                if dot(&c, &g) < 0.0 {
                    c.iter().map(|v| -v).collect()
                } else {
                    c
                }
            })
            .collect();
        let out = gem_project(&g, &cs, 0.0).map_err(|e| e.to_string())?;
        ensure(out.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("(a) case {case}: feasible gradient was modified")
        })?;
        track(&out, &cs);
    }

    // (b) one violated constraint
    let mut worst_b = 0.0f64;
    for case in 0..100 {
        let d = r.gen_range(2..=8);
        let g = random_vec(&mut r, d);
        let mut c = random_vec(&mut r, d);
        if dot(&c, &g) >= 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        let out = gem_project(&g, &[c.clone()], 0.0).map_err(|e| e.to_string())?;
        let k = dot(&g, &c) / dot(&c, &c);
        for j in 0..d {
            let err = (out[j] - (g[j] - k * c[j])).abs();
            worst_b = worst_b.max(err);
            ensure(err <= 1e-8, || format!("(b) case {case}: coordinate {j} off by {err:.1e}"))?;
        }
        track(&out, &[c]);
    }

    // (c) up to three constraints against subset enumeration
    let mut worst_c = 0.0f64;
    for case in 0..300 {
        let d = r.gen_range(2..=8);
        let t = r.gen_range(1..=3);
        let g = random_vec(&mut r, d);
        let cs: Vec<Vec<f64>> = (0..t).map(|_| random_vec(&mut r, d)).collect();
        let out = gem_project(&g, &cs, 0.0).map_err(|e| e.to_string())?;
        let want = gem_oracle(&g, &cs);
        for j in 0..d {
            let err = (out[j] - want[j]).abs();
            worst_c = worst_c.max(err);
            ensure(err <= 1e-6, || format!("(c) case {case}: coordinate {j} off by {err:.1e}"))?;
        }
        track(&out, &cs);
    }

    // (d)
    ensure(min_inner >= -1e-6, || format!("(d) inner product {min_inner:.2e} < -1e-6"))?;
    Ok(format!(
        "(a) 100 bitwise, (b) max err {worst_b:.1e}, (c) 300 cases max err {worst_c:.1e}, (d) min inner {min_inner:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let (mut worst_marg, mut worst_plan) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let p = r.gen_range(1..=6);
        let q = r.gen_range(1..=6);
        let eps = r.gen_range(0.05..1.0);
        let cost: Vec<Vec<f64>> = (0..p).map(|_| (0..q).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let mut a: Vec<f64> = (0..p).map(|_| r.gen_range(0.2..1.0)).collect();
        let mut b: Vec<f64> = (0..q).map(|_| r.gen_range(0.2..1.0)).collect();
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        a.iter_mut().for_each(|v| *v /= sa);
        b.iter_mut().for_each(|v| *v /= sb);
        let c = Tensor::matrix(p, q, cost.concat()).unwrap();
        let plan = sinkhorn(&c, &a, &b, eps, 100_000).map_err(|e| format!("case {case}: {e}"))?;
        let res = marginal_residual(plan.data(), &a, &b);
        worst_marg = worst_marg.max(res);
        ensure(res <= 1e-9, || format!("case {case}: marginal residual {res:.1e}"))?;
        let oracle = sinkhorn_oracle(&cost, &a, &b, eps);
        for i in 0..p {
            for j in 0..q {
                let err = (plan.row(i)[j] - oracle[i][j]).abs();
                worst_plan = worst_plan.max(err);
                ensure(err <= 1e-8, || format!("case {case}: entry ({i},{j}) off by {err:.1e}"))?;
            }
        }
    }
    Ok(format!(
        "100 cost matrices, max marginal residual {worst_marg:.1e}, max plan diff {worst_plan:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let (old, new, f) = (r.gen_range(1..=10), r.gen_range(1..=10), r.gen_range(1..=16));
        let mut head = IncrementalHead::new(f, HeadMode::Linear);
        head.expand(old, case).unwrap();
        head.expand(new, case + 10_000).unwrap();
        let inflate = r.gen_range(0.2..5.0);
        for v in &mut head.weight_mut().unwrap().data_mut()[old * f..] {
            *v *= inflate;
        }
        wa_align(&mut head, old, new).map_err(|e| e.to_string())?;
        let mean = |rows: std::ops::Range<usize>| {
            let k = rows.len() as f64;
            rows.map(|c| norm(head.row(c))).sum::<f64>() / k
        };
        let diff = (mean(0..old) - mean(old..old + new)).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("case {case}: mean norms differ by {diff:.1e}"))?;
    }
    Ok(format!("200 random heads, max mean-norm gap {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 6

fn traced(classes: usize, per_class: usize) -> Dataset {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            data.extend([c as f64, i as f64]);
            labels.push(c);
        }
    }
    Dataset::from_rows(2, data, labels, classes).unwrap()
}

fn check_stream(init: usize, inc: usize, total: usize, seed: u64) -> Result<(), String> {
    let (train_pc, test_pc) = (3, 2);
    let cfg = StreamConfig {
        init_cls: init,
        increment: inc,
        seed,
        total_classes: total,
    };
    let stream = TaskStream::build(&traced(total, train_pc), &traced(total, test_pc), &cfg).map_err(|e| e.to_string())?;
    let expected_b = 1 + (total - init) / inc;
    ensure(stream.num_tasks() == expected_b && cfg.num_tasks() == expected_b, || {
        format!("B = {} but expected {expected_b}", stream.num_tasks())
    })?;
    let mut sizes = vec![init];
    sizes.resize(expected_b, inc);
    ensure(cfg.stage_sizes() == sizes, || format!("stage sizes {:?}", cfg.stage_sizes()))?;

    let order = stream.class_order();
    let mut seen_orig = BTreeSet::new();
    let mut end = 0;
    for (b, task) in stream.tasks().iter().enumerate() {
        ensure(task.classes.len() == sizes[b], || format!("task {b} has {} classes", task.classes.len()))?;
        for &c in &task.classes {
            ensure(seen_orig.insert(c), || format!("class {c} appears in two tasks"))?;
        }
        ensure(task.label_range == (end..end + sizes[b]), || format!("task {b} labels {:?}", task.label_range))?;
        end += sizes[b];
        for (data, per) in [(&task.train, train_pc), (&task.test, test_pc)] {
            ensure(data.len() == per * sizes[b], || format!("task {b} split size {}", data.len()))?;
            for i in 0..data.len() {
                let label = data.labels()[i];
                ensure(task.label_range.contains(&label), || format!("task {b} leaks label {label}"))?;
                ensure(order[label] == data.row(i)[0] as usize, || format!("task {b} relabels wrongly"))?;
            }
        }
        let pool = stream.eval_pool(b).map_err(|e| e.to_string())?;
        let labels: BTreeSet<usize> = pool.labels().iter().copied().collect();
        ensure(labels == (0..end).collect(), || format!("stage {b} pool covers {labels:?}"))?;
        ensure(pool.len() == test_pc * end, || format!("stage {b} pool has {} instances", pool.len()))?;
        for i in 0..pool.len() {
            ensure(order[pool.labels()[i]] == pool.row(i)[0] as usize, || "pool relabels wrongly".into())?;
        }
    }
    ensure(seen_orig == (0..total).collect(), || "classes not covered".into())?;
    Ok(())
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let mut shapes = Vec::new();
    for _ in 0..20 {
        let init = r.gen_range(1..=12);
        let inc = r.gen_range(1..=6);
        let steps = r.gen_range(0..=8);
        shapes.push((init, inc, init + inc * steps, r.gen()));
    }
    for &(init, inc, total, seed) in &shapes {
        check_stream(init, inc, total, seed).map_err(|e| format!("({init}, {inc}, {total}): {e}"))?;
    }
    check_stream(10, 10, 100, 1993).map_err(|e| format!("10 stages: {e}"))?;
    check_stream(50, 10, 100, 1993).map_err(|e| format!("B50: {e}"))?;
    ensure(StreamConfig::new(10, 10, 100).stage_sizes() == vec![10; 10], || "10-stage shape".into())?;
    ensure(
        StreamConfig::new(50, 10, 100).stage_sizes() == vec![50, 10, 10, 10, 10, 10],
        || "B50 shape".into(),
    )?;
    ensure(StreamConfig::new(10, 7, 100).validate().is_err(), || "indivisible split accepted".into())?;
    Ok("20 random configurations plus the 10-stage and B50 shapes".into())
}

// ------------------------------------------------------------ criteria 7 to 10

struct Runs {
    configs: Vec<ExperimentConfig>,
    first: Vec<Result<(RunReport, Duration), String>>,
    second: Vec<Result<RunReport, String>>,
    dir: tempfile::TempDir,
}

fn forgetting_config(alg: Algorithm) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/forgetting")
        .join(format!("{}.toml", alg.name()));
    parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

impl Runs {
    fn dir_of(&self, alg: Algorithm, pass: &str) -> PathBuf {
        self.dir.path().join(pass).join(alg.name())
    }

    fn execute() -> Runs {
        let dir = tempfile::tempdir().unwrap();
        let configs: Vec<ExperimentConfig> = Algorithm::ALL.iter().map(|&a| forgetting_config(a)).collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for cfg in &configs {
            let alg = cfg.algorithm();
            let start = Instant::now();
            let a = runner::run(cfg, Some(&dir.path().join("first").join(alg.name())));
            first.push(a.map(|r| (r, start.elapsed())).map_err(|e| e.to_string()));
            let b = runner::run(cfg, Some(&dir.path().join("second").join(alg.name())));
            second.push(b.map_err(|e| e.to_string()));
        }
        Runs {
            configs,
            first,
            second,
            dir,
        }
    }

    fn report(&self, alg: Algorithm) -> Result<&RunReport, String> {
        let i = Algorithm::ALL.iter().position(|&a| a == alg).unwrap();
        self.first[i].as_ref().map(|(r, _)| r).map_err(|e| format!("{alg}: {e}"))
    }

    fn elapsed(&self, alg: Algorithm) -> Duration {
        let i = Algorithm::ALL.iter().position(|&a| a == alg).unwrap();
        self.first[i].as_ref().map_or(Duration::ZERO, |(_, d)| *d)
    }
}

fn criterion_7(runs: &Runs) -> Outcome {
    let ft = runs.report(Algorithm::Finetune)?;
    let replay = runs.report(Algorithm::Replay)?;
    let icarl = runs.report(Algorithm::Icarl)?;
    let task1 = *ft.task_accuracies.last().unwrap().first().unwrap();
    let (a_ft, a_rp, a_ic) = (ft.result.average, replay.result.average, icarl.result.average);
    let time: Duration = [Algorithm::Finetune, Algorithm::Replay, Algorithm::Icarl]
        .iter()
        .map(|&a| runs.elapsed(a))
        .sum();
    let summary = format!(
        "finetune task-1 final {:.1}%, avg finetune {:.2}% / replay {:.2}% / icarl {:.2}%, {time:.1?}",
        100.0 * task1,
        100.0 * a_ft,
        100.0 * a_rp,
        100.0 * a_ic
    );
    ensure(task1 <= 0.10, || format!("(i) finetune keeps task 1: {summary}"))?;
    ensure(a_rp - a_ft >= 0.15, || format!("(ii) replay gain below 15 points: {summary}"))?;
    ensure(a_ic >= a_rp - 0.02, || format!("(iii) icarl trails replay: {summary}"))?;
    ensure(time < Duration::from_secs(180), || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn criterion_8(runs: &Runs) -> Outcome {
    let mut total = Duration::ZERO;
    for (cfg, &alg) in runs.configs.iter().zip(Algorithm::ALL.iter()) {
        let r = runs.report(alg)?;
        ensure(r.seen_classes() == [2, 4, 6, 8, 10], || format!("{alg}: seen classes {:?}", r.seen_classes()))?;
        ensure(r.memory_sizes.iter().all(|&m| m <= cfg.memory_size), || {
            format!("{alg}: memory sizes {:?} exceed {}", r.memory_sizes, cfg.memory_size)
        })?;
        if alg.uses_memory() {
            ensure(r.memory_sizes.iter().all(|&m| m > 0), || format!("{alg}: memory stayed empty"))?;
        }
        total += runs.elapsed(alg);
    }
    Ok(format!("11 algorithms completed, |Y_b| = 2,4,6,8,10, |E| <= 100, {total:.1?}"))
}

fn criterion_9(runs: &Runs) -> Outcome {
    for (i, &alg) in Algorithm::ALL.iter().enumerate() {
        runs.report(alg)?;
        runs.second[i].as_ref().map_err(|e| format!("{alg} second run: {e}"))?;
        let a = std::fs::read(runs.dir_of(alg, "first").join(RESULTS_CSV)).map_err(|e| e.to_string())?;
        let b = std::fs::read(runs.dir_of(alg, "second").join(RESULTS_CSV)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{alg}: results.csv differs between runs"))?;
    }
    Ok("results.csv byte-identical across two runs for all 11 algorithms".into())
}

fn csv_column(text: &str, col: usize) -> Vec<Option<f64>> {
    text.lines()
        .skip(1)
        .map(|l| {
            let v = l.split(',').nth(col).unwrap();
            (!v.is_empty()).then(|| v.parse().unwrap())
        })
        .collect()
}

fn criterion_10(runs: &Runs) -> Outcome {
    let mut worst = 0.0f64;
    for (cfg, &alg) in runs.configs.iter().zip(Algorithm::ALL.iter()) {
        runs.report(alg)?;
        let dir = runs.dir_of(alg, "first");
        let csv = std::fs::read_to_string(dir.join(RESULTS_CSV)).map_err(|e| e.to_string())?;
        let json = RunReport::load(&dir.join(RESULTS_JSON)).map_err(|e| e.to_string())?;
        let acc: Vec<f64> = csv_column(&csv, 2).into_iter().map(Option::unwrap).collect();
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        ensure(json.result.average == mean, || format!("{alg}: average {} vs CSV mean {mean}", json.result.average))?;

        // every stage evaluates test_per_class instances of each seen class
        let per_class = match cfg.dataset.source(cfg.seed) {
            cil_core::stream::DataSource::Synthetic(s) => s.test_per_class as f64,
            _ => unreachable!("forgetting configs are synthetic"),
        };
        let (old, new) = (csv_column(&csv, 3), csv_column(&csv, 4));
        for b in 0..acc.len() {
            let seen = json.seen_classes()[b] as f64;
            let prev = if b == 0 { 0.0 } else { json.seen_classes()[b - 1] as f64 };
            let recombined = (old[b].unwrap_or(0.0) * prev * per_class + new[b].unwrap() * (seen - prev) * per_class)
                / (seen * per_class);
            let gap = (recombined - acc[b]).abs();
            worst = worst.max(gap);
            ensure(gap <= 1e-12, || format!("{alg} stage {}: groups recombine with gap {gap:.1e}", b + 1))?;
        }
    }

    let mut r = rng(10);
    for case in 0..500 {
        let n = r.gen_range(1..=200);
        let classes = r.gen_range(2..=20);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if r.gen_bool(0.6) { l } else { r.gen_range(0..classes) })
            .collect();
        let split = r.gen_range(0..=classes);
        let overall = stage_accuracy(&preds, &labels).unwrap();
        let g = per_group_accuracy(&preds, &labels, |l| l < split).unwrap();
        let recombined = (g.old.unwrap_or(0.0) * g.old_count as f64 + g.new.unwrap_or(0.0) * g.new_count as f64) / n as f64;
        let gap = (recombined - overall).abs();
        worst = worst.max(gap);
        ensure(gap <= 1e-12, || format!("random case {case}: gap {gap:.1e}"))?;

        let stages: Vec<f64> = (0..r.gen_range(1..=12)).map(|_| r.gen_range(0.0..=1.0)).collect();
        let avg = average_accuracy(&stages).unwrap();
        let mean = stages.iter().sum::<f64>() / stages.len() as f64;
        ensure(avg == mean, || format!("random case {case}: average {avg} vs mean {mean}"))?;
    }
    Ok(format!(
        "11 runs plus 500 random cases, average exact, max recombination gap {worst:.1e}"
    ))
}

// ------------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, &str, Outcome)> = vec![
        ("C1", "autodiff soundness", guarded(criterion_1)),
        ("C2", "herding oracle equivalence", guarded(criterion_2)),
        ("C3", "GEM projection", guarded(criterion_3)),
        ("C4", "Sinkhorn marginals and oracle", guarded(criterion_4)),
        ("C5", "WA exactness", guarded(criterion_5)),
        ("C6", "protocol integrity", guarded(criterion_6)),
    ];
    let runs = catch_unwind(Runs::execute);
    let on_runs = |f: fn(&Runs) -> Outcome| match &runs {
        Ok(r) => guarded(|| f(r)),
        Err(_) => Err("experiment runs panicked".into()),
    };
    results.push(("C7", "forgetting demonstration", on_runs(criterion_7)));
    results.push(("C8", "all algorithms complete the stream", on_runs(criterion_8)));
    results.push(("C9", "determinism", on_runs(criterion_9)));
    results.push(("C10", "metrics arithmetic", on_runs(criterion_10)));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {id:<3} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:<3} {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1?}",
        results.len() - failed,
        results.len(),
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line regardless of output capture.

mod common;

use std::collections::HashSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{blobs, brute_force_greedy, lse, oracle_bleu, oracle_lloyd, words, RowModel, BLEU_FIXTURE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylecraft::decode::{
    combine, contrastive_score, generate_from_state, generate_naive, log_softmax, logprobs, BigramProvider,
    DecodingConfig, GenerationState, LogProbVector, DEFAULT_LOGPROB_FLOOR,
};
use stylecraft::embed::{embed_sentence, hash_feature, DgcnModel};
use stylecraft::eval::{bleu, perplexity};
use stylecraft::graph::{DependencyGraph, Edge};
use stylecraft::sampler::{
    kmeanspp_seed, kmeanspp_seed_indices, lloyd_refine, select_representatives, PointSet, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use stylecraft::tuner::{optimize, SearchBox, SearchMode};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cfg(alpha: f64, beta: f64, eps: f64, max_tokens: usize) -> DecodingConfig {
    DecodingConfig {
        alpha,
        beta,
        plausibility_epsilon: eps,
        max_tokens,
        ..DecodingConfig::default()
    }
}

fn random_lp(rng: &mut ChaCha8Rng, n: usize) -> LogProbVector {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
    log_softmax(&logits).unwrap()
}

fn ten_token_model(seed: u64) -> RowModel {
    RowModel::random(seed, words(&["a", "b", "c", "d", "e", "f", "g", "h", "P", "N"]), &[8, 9], 2)
}

fn naive_reduction() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ten_token_model(3);
    let provider = model.provider();
    let mut worst: f64 = 0.0;
    for draw in 0..1000 {
        let (p, plain, neg) = if draw % 2 == 0 {
            let n = rng.random_range(2..40);
            (random_lp(&mut rng, n), random_lp(&mut rng, n), random_lp(&mut rng, n))
        } else {
            let mut ctx = || (0..rng.random_range(0..6)).map(|_| rng.random_range(0..10)).collect::<Vec<usize>>();
            let (c1, c2, c3) = (ctx(), ctx(), ctx());
            (
                logprobs(&provider, &c1).unwrap(),
                logprobs(&provider, &c2).unwrap(),
                logprobs(&provider, &c3).unwrap(),
            )
        };
        let out = combine(&p, &plain, &neg, &cfg(0.0, 0.0, f64::MIN_POSITIVE, 1)).map_err(|e| e.to_string())?;
        for (a, b) in out.values().iter().zip(p.values()) {
            if a.is_finite() || b.is_finite() {
                worst = worst.max((a - b).abs());
            } else {
                ensure(a == b, || format!("draw {draw}: {a} vs {b}"))?;
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 draws, max deviation {worst:.1e}"))
}

fn normalization() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let (p, plain, neg) = (random_lp(&mut rng, n), random_lp(&mut rng, n), random_lp(&mut rng, n));
        let (a, b) = (rng.random_range(0.0..=10.0), rng.random_range(0.0..=10.0));
        let out = combine(&p, &plain, &neg, &cfg(a, b, 0.1, 1)).map_err(|e| e.to_string())?;
        worst = worst.max(lse(out.values()).abs());
    }
    ensure(worst <= 1e-9, || format!("max |logsumexp| {worst:e}"))?;
    Ok(format!("1000 draws, max |logsumexp| {worst:.1e}"))
}

fn fixed_point() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let l = random_lp(&mut rng, n);
        let (a, b) = (rng.random_range(0.0..=10.0), rng.random_range(0.0..=10.0));
        let out = combine(&l, &l, &l, &cfg(a, b, f64::MIN_POSITIVE, 1)).map_err(|e| e.to_string())?;
        for (x, y) in out.values().iter().zip(l.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 draws, max deviation {worst:.1e}"))
}

fn monotonicity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let floor = DEFAULT_LOGPROB_FLOOR;
    let mut checked = 0;
    for inst in 0..100 {
        let n = rng.random_range(3..30);
        let (p, plain, neg) = (random_lp(&mut rng, n), random_lp(&mut rng, n), random_lp(&mut rng, n));
        let fixed = rng.random_range(0.0..10.0);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
        for y in 0..n {
            let (lp, ll, ln) = (p.values()[y], plain.values()[y], neg.values()[y]);
            if lp - ll.max(floor) > 0.0 {
                let s: Vec<f64> = grid.iter().map(|&a| contrastive_score(lp, ll, ln, a, fixed, floor)).collect();
                ensure(s.windows(2).all(|w| w[1] > w[0]), || format!("instance {inst} token {y}: not increasing in alpha"))?;
                checked += 1;
            }
            if lp - ln.max(floor) > 0.0 {
                let s: Vec<f64> = grid.iter().map(|&b| contrastive_score(lp, ll, ln, fixed, b, floor)).collect();
                ensure(s.windows(2).all(|w| w[1] > w[0]), || format!("instance {inst} token {y}: not increasing in beta"))?;
                checked += 1;
            }
        }
    }
    ensure(checked > 0, || "no eligible tokens".into())?;
    Ok(format!("100 instances, {checked} token sweeps"))
}

fn decoding_oracle() -> Result<String, String> {
    let c = cfg(1.0, 1.0, 0.1, 8);
    for seed in 0..20 {
        let model = ten_token_model(seed);
        let provider = model.provider();
        let (prompt, plain, neg) = (vec![8, 2, 0], vec![2, 0], vec![9, 4, 2, 0]);
        let st = GenerationState::new(prompt.clone(), plain.clone(), neg.clone(), &c);
        let got: Vec<usize> = generate_from_state(&provider, st, &c)
            .map_err(|e| e.to_string())?
            .steps
            .iter()
            .map(|s| s.token_id)
            .collect();
        let want = brute_force_greedy(&model, prompt, plain, neg, 1.0, 1.0, 0.1, DEFAULT_LOGPROB_FLOOR, 8);
        ensure(got == want, || format!("fixture {seed}: {got:?} vs {want:?}"))?;
    }
    Ok("20 fixtures x 8 steps token-identical".into())
}

/// Vocabulary: triggers P and N, a neutral context word, three target-style,
/// three off-style and one neutral token.
fn steering_case(seed: u64) -> RowModel {
    let vocab = words(&["P", "N", "w", "t0", "t1", "t2", "o0", "o1", "o2", "u"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = |r: Vec<f64>| {
        let s: f64 = r.iter().sum();
        r.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let mut base: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.01).collect();
    for v in &mut base[6..9] {
        *v *= 2.5;
    }
    let (gamma, delta) = (rng.random_range(1.5..3.0), rng.random_range(1.5..3.0));
    let prompt: Vec<f64> = base.iter().enumerate().map(|(i, v)| if (3..6).contains(&i) { v * gamma } else { *v }).collect();
    let neg: Vec<f64> = base.iter().enumerate().map(|(i, v)| if (6..9).contains(&i) { v * delta } else { *v }).collect();
    let table = |row: Vec<f64>| {
        let row = norm(row);
        (row.clone(), vec![row; 10])
    };
    let (bs, br) = table(base);
    let (ps, pr) = table(prompt);
    let (ns, nr) = table(neg);
    RowModel {
        vocab,
        tables: vec![(None, bs, br), (Some(0), ps, pr), (Some(1), ns, nr)],
    }
}

fn style_steering() -> Result<String, String> {
    let c = cfg(1.0, 1.0, 0.1, 1);
    let target = |t: usize| (3..6).contains(&t);
    let (mut contrastive, mut naive) = (0, 0);
    for case in 0..100 {
        let model = steering_case(case);
        let provider = model.provider();
        let st = GenerationState::new(vec![0], vec![2], vec![1], &c);
        let got = generate_from_state(&provider, st, &c).map_err(|e| e.to_string())?.steps[0].token_id;
        let optimum = brute_force_greedy(&model, vec![0], vec![2], vec![1], 1.0, 1.0, 0.1, DEFAULT_LOGPROB_FLOOR, 1)[0];
        ensure(got == optimum, || format!("case {case}: decoder {got} vs oracle {optimum}"))?;
        contrastive += target(got) as usize;
        let plain = generate_naive(&provider, vec![2], &c).map_err(|e| e.to_string())?.steps[0].token_id;
        naive += target(plain) as usize;
    }
    ensure(contrastive >= 95 && naive <= 60, || format!("contrastive {contrastive}/100, naive {naive}/100"))?;
    Ok(format!("contrastive {contrastive}/100, naive {naive}/100"))
}

fn clustering() -> Result<String, String> {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let (pts, labels) = blobs(42, &centers, 50, 0.5);
    let set = PointSet::from_vectors(pts.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let res = select_representatives(&set, 4, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut rng).map_err(|e| e.to_string())?;
    let hit: HashSet<usize> = res.representative_indices.iter().map(|&i| labels[i]).collect();
    ensure(hit.len() == 4, || format!("representatives cover {} blobs", hit.len()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let seeds = kmeanspp_seed(&set, 4, &mut rng).map_err(|e| e.to_string())?;
    let lloyd = lloyd_refine(&set, seeds.clone(), DEFAULT_TOL, DEFAULT_MAX_ITER).map_err(|e| e.to_string())?;
    ensure(lloyd.assignments == oracle_lloyd(&pts, seeds, DEFAULT_TOL, DEFAULT_MAX_ITER), || {
        "Lloyd assignments differ from the reference".into()
    })?;

    let xs = [0.0, 1.0, 3.0];
    let line = PointSet::from_vectors(xs.iter().map(|&x| vec![x]).collect()).map_err(|e| e.to_string())?;
    let mut counts = [[0u64; 3]; 3];
    let trials = 10_000u64;
    for s in 0..trials {
        let idx = kmeanspp_seed_indices(&line, 2, &mut ChaCha8Rng::seed_from_u64(s)).map_err(|e| e.to_string())?;
        counts[idx[0]][idx[1]] += 1;
    }
    let mut tv = 0.0;
    for a in 0..3 {
        let total: f64 = xs.iter().map(|x| (xs[a] - x).powi(2)).sum();
        for b in 0..3 {
            tv += (counts[a][b] as f64 / trials as f64 - (xs[a] - xs[b]).powi(2) / total / 3.0).abs();
        }
    }
    tv /= 2.0;
    ensure(tv <= 0.02, || format!("second-seed TV {tv:.4}"))?;
    Ok(format!("4/4 blobs, Lloyd identical, second-seed TV {tv:.4}"))
}

const LABELS: [&str; 8] = ["nsubj", "obj", "amod", "det", "advmod", "conj", "punct", "made-up"];

fn random_tree(rng: &mut ChaCha8Rng) -> DependencyGraph {
    let n = rng.random_range(1..9);
    let nodes: Vec<String> = (0..n).map(|i| format!("w{}", rng.random_range(0..20) + i)).collect();
    let edges = (1..n)
        .map(|d| Edge::new(rng.random_range(0..d), d, LABELS[rng.random_range(0..LABELS.len())]))
        .collect();
    DependencyGraph::new("g", nodes, edges).unwrap()
}

fn embedding_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = DgcnModel::random(2, 16, 21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g = random_tree(&mut rng);
        let n = g.nodes.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut nodes = vec![String::new(); n];
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = g.nodes[old].clone();
        }
        let edges = g.edges.iter().map(|e| Edge::new(perm[e.head], perm[e.dependent], e.label.clone())).collect();
        let h = DependencyGraph::new("h", nodes, edges).unwrap();
        let (a, b) = (
            embed_sentence(&g, &model).map_err(|e| e.to_string())?,
            embed_sentence(&h, &model).map_err(|e| e.to_string())?,
        );
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let single = DependencyGraph::new("s", vec!["alone".into()], vec![]).unwrap();
    let zero = DgcnModel::random(0, 16, 21);
    let e = embed_sentence(&single, &zero).map_err(|e| e.to_string())?;
    ensure(e.values == hash_feature("alone", 21, 16), || "k=0 single node differs from its feature".into())?;
    Ok(format!("50 graphs, max deviation {worst:.1e}; k=0 identity holds"))
}

fn metrics() -> Result<String, String> {
    let id = bleu("the staff were friendly .", &["the staff were friendly ."]);
    ensure(id == 100.0, || format!("identity BLEU {id}"))?;
    let vocab: Vec<String> = (0..13).map(|i| format!("v{i}")).collect();
    let uniform = BigramProvider::uniform(vocab).map_err(|e| e.to_string())?;
    let ppl = perplexity(&uniform, "v0 v5 v12 v5 v3").map_err(|e| e.to_string())?;
    ensure((ppl - 13.0).abs() <= 1e-9, || format!("uniform perplexity {ppl}"))?;
    let mut worst: f64 = 0.0;
    for (cand, refs) in BLEU_FIXTURE {
        worst = worst.max((bleu(cand, refs) - oracle_bleu(cand, refs)).abs());
    }
    ensure(worst < 1e-6, || format!("fixture BLEU deviation {worst:e}"))?;
    Ok(format!("identity 100, uniform PPL 13, 20 pairs max deviation {worst:.1e}"))
}

fn tuner() -> Result<String, String> {
    let bowl = |a: f64, b: f64| Ok(-(a - 7.3).powi(2) - (b - 1.6).powi(2));
    let bx = SearchBox::default();
    let out = optimize(bowl, &bx, SearchMode::GaussianProcess, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let first = &out.trace[0];
    ensure((first.alpha, first.beta) == (5.0, 5.0), || format!("first trial ({}, {})", first.alpha, first.beta))?;
    ensure(out.trace.len() == 30, || format!("{} evaluations", out.trace.len()))?;
    let err = (out.best.alpha - 7.3).abs().max((out.best.beta - 1.6).abs());
    ensure(err <= 0.5, || format!("best ({:.3}, {:.3}), L-inf error {err:.3}", out.best.alpha, out.best.beta))?;
    Ok(format!("first (5, 5); best ({:.3}, {:.3}) after 30, L-inf error {err:.3}", out.best.alpha, out.best.beta))
}

fn reproducibility() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_run.toml");
    let run = || -> Result<String, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_stylecraft"))
            .args(["transfer", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        let text = fs::read_to_string(out.join("manifest.json")).map_err(|e| e.to_string())?;
        Ok(text.lines().filter(|l| !l.trim_start().starts_with("\"created_at\"")).collect::<Vec<_>>().join("\n"))
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "manifests differ".into())?;
    Ok(format!("two runs, {} bytes identical outside created_at", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, Check); 11] = [
        ("naive reduction", Duration::from_secs(1), naive_reduction),
        ("normalization", Duration::from_secs(1), normalization),
        ("fixed point", Duration::from_secs(1), fixed_point),
        ("score monotonicity", Duration::from_secs(1), monotonicity),
        ("decoding oracle equivalence", Duration::from_secs(1), decoding_oracle),
        ("style steering", Duration::from_secs(5), style_steering),
        ("clustering", Duration::from_secs(10), clustering),
        ("embedding invariance", Duration::from_secs(5), embedding_invariance),
        ("metrics", Duration::from_secs(5), metrics),
        ("tuner", Duration::from_secs(10), tuner),
        ("end-to-end reproducibility", Duration::from_secs(10), reproducibility),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = result.and_then(|detail| {
            if took <= limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {took:.2?}, limit {limit:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({took:.2?}): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

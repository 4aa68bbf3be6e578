//! Independent reference implementations shared by the integration suites.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylecraft::decode::{BigramProvider, BigramTable, RoutedProvider};

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `per_blob` isotropic Gaussian points around each center; returns the points
/// and the blob label of each.
pub fn blobs(seed: u64, centers: &[[f64; 2]], per_blob: usize, sd: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (b, c) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            pts.push(vec![c[0] + sd * normal(&mut rng), c[1] + sd * normal(&mut rng)]);
            labels.push(b);
        }
    }
    (pts, labels)
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn closest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centers.iter().enumerate() {
        let d = d2(p, c);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Plain Lloyd: assign, recompute means (empty clusters stay put), stop when no
/// center moves by `tol` or after `max_iter` updates; final reassignment.
pub fn oracle_lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> Vec<usize> {
    for _ in 0..max_iter {
        let assign: Vec<usize> = points.iter().map(|p| closest(p, &centers)).collect();
        let mut moved: f64 = 0.0;
        for c in 0..centers.len() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..points[0].len())
                .map(|k| members.iter().map(|p| p[k]).sum::<f64>() / members.len() as f64)
                .collect();
            moved = moved.max(d2(&mean, &centers[c]).sqrt());
            centers[c] = mean;
        }
        if moved < tol {
            break;
        }
    }
    points.iter().map(|p| closest(p, &centers)).collect()
}

/// Nearest unused point per center, in center order.
pub fn oracle_deembed(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    let mut taken = vec![false; points.len()];
    centers
        .iter()
        .map(|c| {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.sort_by(|&a, &b| d2(&points[a], c).total_cmp(&d2(&points[b], c)).then(a.cmp(&b)));
            let pick = *order.iter().find(|&&i| !taken[i]).unwrap();
            taken[pick] = true;
            pick
        })
        .collect()
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut spaced = String::new();
    for ch in s.to_lowercase().chars() {
        if ch.is_alphanumeric() || ch.is_whitespace() {
            spaced.push(ch);
        } else {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        }
    }
    spaced.split_whitespace().map(String::from).collect()
}

fn grams(t: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut m = BTreeMap::new();
    if t.len() >= n {
        for i in 0..=t.len() - n {
            *m.entry(t[i..i + n].to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// (matches, totals) for n = 1..4, candidate length, closest reference length.
fn oracle_stats(cand: &str, refs: &[&str]) -> ([f64; 4], [f64; 4], f64, f64) {
    let c = oracle_tokens(cand);
    let rs: Vec<Vec<String>> = refs.iter().map(|r| oracle_tokens(r)).collect();
    let mut m = [0.0; 4];
    let mut t = [0.0; 4];
    for n in 1..=4 {
        let cg = grams(&c, n);
        for (g, cnt) in &cg {
            let maxr = rs.iter().map(|r| grams(r, n).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            m[n - 1] += (*cnt).min(maxr) as f64;
            t[n - 1] += *cnt as f64;
        }
    }
    let mut rl = rs[0].len();
    for r in &rs {
        let (d_new, d_old) = ((r.len() as i64 - c.len() as i64).abs(), (rl as i64 - c.len() as i64).abs());
        if d_new < d_old || (d_new == d_old && r.len() < rl) {
            rl = r.len();
        }
    }
    (m, t, c.len() as f64, rl as f64)
}

fn oracle_score(m: [f64; 4], t: [f64; 4], c: f64, r: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let logs: Vec<f64> = (0..4)
        .filter(|&n| t[n] > 0.0)
        .map(|n| if m[n] > 0.0 { m[n] / t[n] } else { 0.1 / t[n] })
        .map(f64::ln)
        .collect();
    let geo = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * geo
}

/// Hand-picked (candidate, references) cases for the BLEU comparison.
pub const BLEU_FIXTURE: [(&str, &[&str]); 20] = [
    ("the cat sat on the mat", &["the cat sat on the mat"]),
    ("the cat sat on the mat", &["a cat was sitting on the mat"]),
    ("the cat", &["the cat sat on the mat"]),
    ("on the mat the cat sat", &["the cat sat on the mat"]),
    ("The food was great!", &["the food was great !"]),
    ("the food was great", &["the food was good", "the meal was great"]),
    ("service was slow , but friendly", &["the service was slow but friendly"]),
    ("I loved it. Truly.", &["i loved it", "truly i loved it ."]),
    ("nothing matches here", &["entirely different words"]),
    ("a a a a a a", &["a a b b"]),
    ("it was fine fine fine", &["it was fine", "fine it was"]),
    ("we will return", &["we will definitely return soon", "we will return"]),
    ("don't go there", &["do not go there"]),
    ("the staff were rude and the food was cold", &["the staff were friendly and the food was warm"]),
    ("great", &["great"]),
    ("great place", &["a great place to eat"]),
    ("prices are high, portions small", &["prices are high and portions are small"]),
    ("x y z w v", &["x y z w v u t"]),
    ("one two three four five six seven", &["one two three four"]),
    ("Thou art a villain", &["you are a villain", "thou art a rogue"]),
];

pub fn oracle_bleu(cand: &str, refs: &[&str]) -> f64 {
    let (m, t, c, r) = oracle_stats(cand, refs);
    oracle_score(m, t, c, r)
}

pub fn oracle_corpus_bleu(cands: &[&str], refs: &[&str]) -> f64 {
    let (mut m, mut t, mut c, mut r) = ([0.0; 4], [0.0; 4], 0.0, 0.0);
    for (x, y) in cands.iter().zip(refs) {
        let s = oracle_stats(x, &[y]);
        for n in 0..4 {
            m[n] += s.0[n];
            t[n] += s.1[n];
        }
        c += s.2;
        r += s.3;
    }
    oracle_score(m, t, c, r)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// A routed bigram model held as plain probability rows, used both to build the
/// provider under test and to evaluate the oracle directly.
#[derive(Clone)]
pub struct RowModel {
    pub vocab: Vec<String>,
    /// (trigger id or None for the base, start row, rows by previous token)
    pub tables: Vec<(Option<usize>, Vec<f64>, Vec<Vec<f64>>)>,
}

pub fn random_row(rng: &mut ChaCha8Rng, n: usize, zeros: usize) -> Vec<f64> {
    let mut r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
    for _ in 0..zeros {
        let i = rng.random_range(0..n);
        r[i] = 0.0;
    }
    if r.iter().all(|v| *v == 0.0) {
        r[0] = 1.0;
    }
    let s: f64 = r.iter().sum();
    r.iter().map(|v| v / s).collect()
}

impl RowModel {
    pub fn random(seed: u64, vocab: Vec<String>, triggers: &[usize], zeros: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vocab.len();
        let table = |rng: &mut ChaCha8Rng| (random_row(rng, n, zeros), (0..n).map(|_| random_row(rng, n, zeros)).collect::<Vec<_>>());
        let mut tables = Vec::new();
        let (s, r) = table(&mut rng);
        tables.push((None, s, r));
        for &t in triggers {
            let (s, r) = table(&mut rng);
            tables.push((Some(t), s, r));
        }
        Self { vocab, tables }
    }

    pub fn provider(&self) -> RoutedProvider {
        let build = |start: &Vec<f64>, rows: &Vec<Vec<f64>>| {
            let table = BigramTable {
                start: start.clone(),
                rows: self.vocab.iter().cloned().zip(rows.iter().cloned()).collect(),
                default: None,
            };
            BigramProvider::new(self.vocab.clone(), &table).unwrap()
        };
        let (_, s, r) = &self.tables[0];
        let routes = self.tables[1..]
            .iter()
            .map(|(t, s, r)| (self.vocab[t.unwrap()].clone(), build(s, r)))
            .collect();
        RoutedProvider::new(build(s, r), routes).unwrap()
    }

    /// Next-token probabilities for a context: the first trigger table whose
    /// trigger appears in the context, else the base; start row when empty.
    pub fn probs(&self, ctx: &[usize]) -> Vec<f64> {
        let table = self.tables[1..]
            .iter()
            .find(|(t, _, _)| ctx.contains(&t.unwrap()))
            .unwrap_or(&self.tables[0]);
        match ctx.last() {
            None => table.1.clone(),
            Some(&prev) => table.2[prev].clone(),
        }
    }
}

/// Evaluates the contrastive rule token by token over the whole vocabulary and
/// takes the highest score (lowest index on ties).
pub fn brute_force_greedy(
    model: &RowModel,
    mut prompt: Vec<usize>,
    mut plain: Vec<usize>,
    mut neg: Vec<usize>,
    alpha: f64,
    beta: f64,
    eps: f64,
    floor: f64,
    steps: usize,
) -> Vec<usize> {
    let mut out = Vec::new();
    for _ in 0..steps {
        let (pp, pl, pn) = (model.probs(&prompt), model.probs(&plain), model.probs(&neg));
        let top = pp.iter().cloned().fold(0.0, f64::max);
        let mut best: Option<(f64, usize)> = None;
        for y in 0..pp.len() {
            if pp[y] <= 0.0 || pp[y] < eps * top {
                continue;
            }
            let s = (1.0 + alpha + beta) * pp[y].ln() - alpha * pl[y].ln().max(floor) - beta * pn[y].ln().max(floor);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, y));
            }
        }
        let y = best.unwrap().1;
        out.push(y);
        prompt.push(y);
        plain.push(y);
        neg.push(y);
    }
    out
}

/// Log-sum-exp with the maximum factored out.
pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn words(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn index_of(vocab: &[String]) -> HashMap<String, usize> {
    vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

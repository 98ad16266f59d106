//! Independent reference implementations used to check the library: plain
//! loops and brute-force enumeration, no shared code with the crate under
//! test beyond input types.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

// ---------------------------------------------------------------- losses

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn ce(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].ln()
}

/// KL(softmax(teacher/T) ‖ softmax(student[..n_old]/T)).
pub fn kl(teacher: &[f64], student: &[f64], temperature: f64) -> f64 {
    let n = teacher.len();
    let p = softmax(&teacher.iter().map(|v| v / temperature).collect::<Vec<_>>());
    let q = softmax(&student[..n].iter().map(|v| v / temperature).collect::<Vec<_>>());
    p.iter().zip(&q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------- GEM

pub struct GemReference {
    pub g_proj: Vec<f64>,
    /// Every feasible candidate met during the enumeration, for minimality.
    pub feasible: Vec<Vec<f64>>,
}

/// Projection of `g` onto `{z : G z ≥ 0}` by enumerating every active set
/// `S`: solve the equality-constrained problem on `S` with a dense solver,
/// keep candidates with non-negative multipliers that satisfy all
/// constraints, return the closest one to `g`.
pub fn gem_reference(g: &[f64], rows: &[Vec<f64>]) -> GemReference {
    let d = g.len();
    let k = rows.len();
    let gv = DVector::from_column_slice(g);
    let mut feasible = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << k) {
        let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let z: DVector<f64> = if active.is_empty() {
            gv.clone()
        } else {
            let a = DMatrix::from_fn(active.len(), d, |r, c| rows[active[r]][c]);
            let q = &a * a.transpose();
            let rhs = -(&a * &gv);
            let Some(v) = q.lu().solve(&rhs) else { continue };
            if v.iter().any(|&x| x < -1e-12) {
                continue;
            }
            &gv + a.transpose() * v
        };
        let ok = rows
            .iter()
            .all(|r| r.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() >= -1e-9);
        if !ok {
            continue;
        }
        let dist = (&z - &gv).norm();
        let zv: Vec<f64> = z.iter().copied().collect();
        feasible.push(zv.clone());
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, zv));
        }
    }
    GemReference {
        g_proj: best.expect("the full active set or a subset is always feasible").1,
        feasible,
    }
}

// ---------------------------------------------------------------- selection

fn mean_in_id_order(ids: &[String], emb: &[Vec<f64>]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let dim = emb[0].len();
    let mut sum = vec![0.0; dim];
    for &i in &order {
        for j in 0..dim {
            sum[j] += emb[i][j];
        }
    }
    sum.iter().map(|s| s / ids.len() as f64).collect()
}

fn lex_less(a: &[(f64, &str)], b: &[(f64, &str)]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.0.total_cmp(&y.0) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => match x.1.cmp(y.1) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            },
        }
    }
    false
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for mut rest in combinations(n - first - 1, k - 1) {
            rest.iter_mut().for_each(|r| *r += first + 1);
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for prefix in permutations(n, k - 1) {
        for i in 0..n {
            if !prefix.contains(&i) {
                let mut p = prefix.clone();
                p.push(i);
                out.push(p);
            }
        }
    }
    out
}

/// The `k`-subset whose distances to the class mean, sorted ascending with
/// ties by id, are lexicographically smallest; returned in that order.
pub fn closest_reference(ids: &[String], emb: &[Vec<f64>], k: usize) -> Vec<String> {
    let k = k.min(ids.len());
    let mean = mean_in_id_order(ids, emb);
    let dist: Vec<f64> = emb.iter().map(|e| sq_dist(e, &mean)).collect();
    let mut best: Option<Vec<(f64, &str)>> = None;
    for subset in combinations(ids.len(), k) {
        let mut key: Vec<(f64, &str)> = subset.iter().map(|&i| (dist[i], ids[i].as_str())).collect();
        key.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        if best.as_ref().is_none_or(|b| lex_less(&key, b)) {
            best = Some(key);
        }
    }
    best.unwrap().into_iter().map(|(_, id)| id.to_owned()).collect()
}

/// The ordered `k`-sequence minimizing, lexicographically, the per-step
/// herding objective `‖μ − (1/j) Σ_{i≤j} e_{s_i}‖²` with ties by id.
pub fn herding_reference(ids: &[String], emb: &[Vec<f64>], k: usize) -> Vec<String> {
    let k = k.min(ids.len());
    let mean = mean_in_id_order(ids, emb);
    let dim = mean.len();
    let mut best: Option<Vec<(f64, &str)>> = None;
    for seq in permutations(ids.len(), k) {
        let mut running = vec![0.0; dim];
        let mut key = Vec::with_capacity(k);
        for (step, &i) in seq.iter().enumerate() {
            let cand: Vec<f64> = (0..dim).map(|j| (running[j] + emb[i][j]) / (step + 1) as f64).collect();
            key.push((sq_dist(&mean, &cand), ids[i].as_str()));
            for j in 0..dim {
                running[j] += emb[i][j];
            }
        }
        if best.as_ref().is_none_or(|b| lex_less(&key, b)) {
            best = Some(key);
        }
    }
    best.unwrap().into_iter().map(|(_, id)| id.to_owned()).collect()
}

//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::HashSet;

use segvggt::assign::Assignment;
use segvggt::eval::EvalInstance;

/// Every injective query choice per target, as per-query target vectors with
/// `targets` standing for "unmatched".
pub fn all_assignments(queries: usize, targets: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, targets: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == targets {
            out.push(cur.clone());
            return;
        }
        for j in 0..cur.len() {
            if cur[j] == targets {
                cur[j] = k;
                rec(k + 1, targets, cur, out);
                cur[j] = targets;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, targets, &mut vec![targets; queries], &mut out);
    out
}

pub fn cost_of(costs: &[f64], targets: usize, per_query: &[usize]) -> f64 {
    per_query
        .iter()
        .enumerate()
        .filter(|(_, &k)| k < targets)
        .map(|(j, &k)| costs[j * targets + k])
        .sum()
}

pub fn as_vector(a: &Assignment, queries: usize, targets: usize) -> Vec<usize> {
    let mut v = vec![targets; queries];
    for &(j, k) in &a.pairs {
        v[j] = k;
    }
    v
}

pub fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<_> = a.iter().collect();
    let b: HashSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Enumerates every way the ranked predictions can claim gts, keeps the one
/// the greedy rule produces, and integrates interpolated precision by
/// definition.
pub fn ap_oracle(preds: &[EvalInstance], gts: &[EvalInstance], t: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    // candidate outcomes: for each ranked prediction, a gt index or none
    let choices = gts.len() + 1;
    let total = choices.pow(order.len() as u32);
    let mut greedy = None;
    for code in 0..total {
        let mut c = code;
        let outcome: Vec<Option<usize>> = order
            .iter()
            .map(|_| {
                let v = c % choices;
                c /= choices;
                (v < gts.len()).then_some(v)
            })
            .collect();
        let mut used = vec![false; gts.len()];
        let mut ok = true;
        for (r, &pi) in order.iter().enumerate() {
            let p = &preds[pi];
            let best = (0..gts.len())
                .filter(|&g| !used[g] && gts[g].scene == p.scene)
                .map(|g| (g, set_iou(&p.points, &gts[g].points)))
                .filter(|&(_, v)| v >= t)
                .fold(None::<(usize, f64)>, |b, (g, v)| match b {
                    Some((_, bv)) if bv >= v => b,
                    _ => Some((g, v)),
                })
                .map(|(g, _)| g);
            if best != outcome[r] {
                ok = false;
                break;
            }
            if let Some(g) = best {
                used[g] = true;
            }
        }
        if ok {
            greedy = Some(outcome);
            break;
        }
    }
    let outcome = greedy.expect("greedy outcome enumerated");
    let n = outcome.len();
    let prec: Vec<f64> = (0..n)
        .map(|i| outcome[..=i].iter().filter(|o| o.is_some()).count() as f64 / (i + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for i in 0..n {
        if outcome[i].is_some() {
            let best_later = prec[i..].iter().cloned().fold(0.0, f64::max);
            ap += best_later / gts.len() as f64;
        }
    }
    ap
}

// ½ KL(p‖m) + ½ KL(q‖m) with 0·log 0 = 0, written out independently.
pub fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}

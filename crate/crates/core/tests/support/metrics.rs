use std::collections::BTreeMap;

use medseq::evalmetrics::{Bucket, EvalError, Forecaster, ModelRow};
use medseq::timeline::{Timeline, TokenKind};

/// Scores from a hash of the prefix and the candidate, quantized to `levels`
/// values so ties are common.
pub struct HashForecaster {
    pub n_concepts: usize,
    pub levels: u64,
}

fn mix(mut h: u64, x: u64) -> u64 {
    h ^= x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl Forecaster for HashForecaster {
    fn name(&self) -> String {
        "hash".into()
    }

    fn position_scores(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut h = 17u64;
        for &t in tokens {
            h = mix(h, t as u64);
            out.push((0..self.n_concepts).map(|c| (mix(h, c as u64) % self.levels) as f64).collect());
        }
        Ok(out)
    }
}

/// Metrics recomputed point by point: each point re-scores its own prefix,
/// fully sorts the candidates and reads off the target's place.
pub struct BruteForce {
    pub points: usize,
    pub precision: BTreeMap<usize, f64>,
    pub buckets: Vec<(usize, Option<f64>, usize)>,
}

pub fn brute_force(model: &dyn Forecaster, timelines: &[Timeline], n_list: &[usize], k_list: &[usize], limit: usize) -> BruteForce {
    let mut found: Vec<(usize, usize)> = Vec::new(); // (position, rank)
    'outer: for t in timelines {
        let ids = t.ids();
        for j in 1..ids.len() {
            if t.tokens[j].kind != TokenKind::Concept {
                continue;
            }
            if found.len() == limit {
                break 'outer;
            }
            let scores = model.position_scores(&ids[..j]).unwrap().pop().unwrap();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let rank = order.iter().position(|&c| c == ids[j]).unwrap() + 1;
            found.push((j, rank));
        }
    }
    let total = found.len();
    let mut precision = BTreeMap::new();
    for &n in n_list {
        let mut hits = 0usize;
        for &(_, r) in &found {
            if r <= n {
                hits += 1;
            }
        }
        precision.insert(n, hits as f64 / total as f64);
    }
    let mut buckets = Vec::new();
    for &k in k_list {
        let (mut support, mut hits) = (0usize, 0usize);
        for &(j, r) in &found {
            if j >= k {
                support += 1;
                if r == 1 {
                    hits += 1;
                }
            }
        }
        buckets.push((k, (support > 0).then(|| hits as f64 / support as f64), support));
    }
    BruteForce { points: total, precision, buckets }
}

/// Differences between a library row and the brute-force values.
pub fn compare(row: &ModelRow, brute: &BruteForce) -> Vec<String> {
    let mut out = Vec::new();
    if row.points != brute.points {
        out.push(format!("points {} vs {}", row.points, brute.points));
    }
    if row.precision != brute.precision {
        out.push(format!("precision {:?} vs {:?}", row.precision, brute.precision));
    }
    let got: Vec<(usize, Option<f64>, usize)> = row.by_position.iter().map(|b: &Bucket| (b.k, b.value, b.support)).collect();
    if got != brute.buckets {
        out.push(format!("buckets {got:?} vs {:?}", brute.buckets));
    }
    out
}

/// Timelines truncated so that they hold exactly `limit` evaluation points.
pub fn first_points(timelines: &[Timeline], limit: usize) -> Vec<Timeline> {
    let mut out = Vec::new();
    let mut left = limit;
    for t in timelines {
        if left == 0 {
            break;
        }
        let mut cut = t.clone();
        let mut seen = 0;
        let mut end = t.tokens.len();
        for (j, tok) in t.tokens.iter().enumerate().skip(1) {
            if tok.kind == TokenKind::Concept {
                if seen == left {
                    end = j;
                    break;
                }
                seen += 1;
            }
        }
        cut.tokens.truncate(end);
        left -= seen;
        out.push(cut);
    }
    out
}

/// The invariants every report must satisfy: P@1 ≤ P@3 ≤ P@5, H 0+ = P@1,
/// and non-increasing support with k.
pub fn report_invariants(row: &ModelRow) -> Vec<String> {
    let mut out = Vec::new();
    let p: Vec<f64> = row.precision.values().copied().collect();
    if p.windows(2).any(|w| w[0] > w[1]) {
        out.push(format!("{}: precision not monotone {p:?}", row.model));
    }
    if let (Some(h0), Some(p1)) = (row.by_position.iter().find(|b| b.k == 0), row.precision.get(&1)) {
        if h0.value != Some(*p1) {
            out.push(format!("{}: H 0+ {:?} != P@1 {p1}", row.model, h0.value));
        }
    }
    if row.by_position.windows(2).any(|w| w[0].support < w[1].support) {
        out.push(format!("{}: support increases with k", row.model));
    }
    out
}

mod support;

use medseq::evalmetrics::{evaluate_with, precision_by_position, EvalPoint};
use medseq::timeline::{Timeline, Token, TokenKind};
use support::checks::metric_oracle;
use support::metrics::{brute_force, compare, HashForecaster};

#[test]
fn library_agrees_with_brute_force_on_1000_points() {
    println!("{}", metric_oracle().unwrap());
}

#[test]
fn hand_assigned_ranks_bucket_by_position() {
    // 100 points: positions 1..=100; rank 1 exactly when the position is a multiple of 4.
    let points: Vec<EvalPoint> =
        (1..=100).map(|j| EvalPoint { patient_id: "p".into(), timeline: 0, position: j, target: 0 }).collect();
    let ranks: Vec<usize> = (1..=100).map(|j| if j % 4 == 0 { 1 } else { 2 }).collect();
    let b = precision_by_position(&ranks, &points, &[0, 10, 20, 30], 1);
    // k=10: positions 10..=100 hold 91 points, 23 multiples of 4 (12..=100).
    // k=20: 81 points, 21 hits (20..=100). k=30: 71 points, 18 hits (32..=100).
    assert_eq!(b.iter().map(|x| x.support).collect::<Vec<_>>(), [100, 91, 81, 71]);
    assert_eq!(b[0].value, Some(0.25));
    assert_eq!(b[1].value, Some(23.0 / 91.0));
    assert_eq!(b[2].value, Some(21.0 / 81.0));
    assert_eq!(b[3].value, Some(18.0 / 71.0));
}

#[test]
fn short_timelines_leave_late_buckets_empty() {
    let tl = |n: usize| Timeline {
        patient_id: n.to_string(),
        tokens: std::iter::once(Token { kind: TokenKind::Age, id: 20 })
            .chain((0..n).map(|i| Token { kind: TokenKind::Concept, id: i % 10 }))
            .collect(),
    };
    let tls: Vec<Timeline> = (3..9).map(tl).collect();
    let model = HashForecaster { n_concepts: 10, levels: 3 };
    let row = evaluate_with(&model, &tls, &[1, 3, 5], &[0, 10]).unwrap();
    assert_eq!(row.by_position[1].support, 0);
    assert_eq!(row.by_position[1].value, None);
    assert!(compare(&row, &brute_force(&model, &tls, &[1, 3, 5], &[0, 10], usize::MAX)).is_empty());
}

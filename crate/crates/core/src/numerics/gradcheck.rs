//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{NodeId, NumericsError, Tape, Tensor};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Which coordinates of each input are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to this many coordinates per input, sampled without replacement.
    Sample(usize, u64),
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Tape<f64>, NodeId, Vec<NodeId>), NumericsError>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut tape = Tape::new();
    let ids = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &ids)?;
    let v = tape.value(out);
    if v.rank() != 0 {
        return Err(NumericsError::NotScalar { shape: v.shape().to_vec() });
    }
    let value = v.item();
    if !value.is_finite() {
        return Err(NumericsError::NonFinite { op: "gradient_check" });
    }
    Ok((value, tape, out, ids))
}

/// Compares reverse-mode gradients of a scalar function of several tensor
/// inputs against central differences with step `h`.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    coords: Coordinates,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let (_, tape, out, ids) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.get(id)).collect();
    drop(tape);

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let selected: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample(k, seed) => {
                let mut rng = crate::rng::seeded(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
                if k >= n {
                    (0..n).collect()
                } else {
                    let mut s = sample(&mut rng, n, k).into_vec();
                    s.sort_unstable();
                    s
                }
            }
        };
        for c in selected {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + h;
            let (plus, ..) = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig - h;
            let (minus, ..) = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i].data()[c], numeric);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (i, c);
            }
        }
    }
    Ok(report)
}

/// Single-input form: max relative error of the gradient of `f` at `point`.
pub fn gradient_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId, NumericsError>,
{
    check_gradients(|tape, ids| f(tape, ids[0]), std::slice::from_ref(point), h, Coordinates::All)
        .map(|r| r.max_relative_error)
}

/// Random point with entries uniform in `[-scale, scale]`.
pub fn random_point<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = gradient_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-3, 2e-3), 1e-3);
        assert_eq!(relative_error(10.0, 11.0), 1.0 / 11.0);
    }
}

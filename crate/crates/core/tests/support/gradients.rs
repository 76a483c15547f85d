use medseq::baselines::{Lstm, LstmConfig};
use medseq::model::{Batch, SequenceModel};
use medseq::numerics::{check_gradients, random_point, Coordinates, NodeId, NumericsError, Tape, Tensor};
use medseq::rng::seeded;
use medseq::training::clm_loss;

type Scalar = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>>;

/// A primitive under test: input shapes and a scalar-valued wrapper.
pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: Scalar,
}

/// Fixed, non-uniform weights so the projection exercises every output.
fn project(tape: &mut Tape<f64>, x: NodeId) -> Result<NodeId, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())?;
    let w = tape.constant(w)?;
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn unary(name: &'static str, shape: &[usize], op: fn(&mut Tape<f64>, NodeId) -> Result<NodeId, NumericsError>) -> Primitive {
    Primitive {
        name,
        shapes: vec![shape.to_vec()],
        f: Box::new(move |t, x| {
            let y = op(t, x[0])?;
            project(t, y)
        }),
    }
}

fn binary(
    name: &'static str,
    a: &[usize],
    b: &[usize],
    op: fn(&mut Tape<f64>, NodeId, NodeId) -> Result<NodeId, NumericsError>,
) -> Primitive {
    Primitive {
        name,
        shapes: vec![a.to_vec(), b.to_vec()],
        f: Box::new(move |t, x| {
            let y = op(t, x[0], x[1])?;
            project(t, y)
        }),
    }
}

pub fn primitives() -> Vec<Primitive> {
    let mask: Vec<bool> = (0..15).map(|i| i % 5 != 3).collect();
    vec![
        binary("add", &[3, 4], &[3, 4], |t, a, b| t.add(a, b)),
        binary("add_broadcast", &[2, 3, 4], &[4], |t, a, b| t.add(a, b)),
        binary("sub", &[3, 4], &[3, 4], |t, a, b| t.sub(a, b)),
        binary("mul", &[3, 4], &[3, 4], |t, a, b| t.mul(a, b)),
        binary("mul_broadcast", &[2, 3], &[3], |t, a, b| t.mul(a, b)),
        unary("scale", &[5], |t, a| t.scale(a, 1.7)),
        unary("add_scalar", &[5], |t, a| t.add_scalar(a, -0.4)),
        binary("matmul", &[2, 3, 4], &[4, 5], |t, a, b| t.matmul(a, b)),
        binary("matmul_nt", &[3, 4], &[5, 4], |t, a, b| t.matmul_nt(a, b)),
        binary("bmm", &[2, 3, 4], &[2, 4, 5], |t, a, b| t.bmm(a, b)),
        binary("bmm_nt", &[2, 3, 4], &[2, 5, 4], |t, a, b| t.bmm_nt(a, b)),
        Primitive { name: "sum", shapes: vec![vec![6]], f: Box::new(|t, x| t.sum(x[0])) },
        unary("softmax", &[3, 5], |t, a| t.softmax(a, None)),
        Primitive {
            name: "softmax_masked",
            shapes: vec![vec![3, 5]],
            f: Box::new(move |t, x| {
                let y = t.softmax(x[0], Some(&mask))?;
                project(t, y)
            }),
        },
        Primitive {
            name: "layer_norm",
            shapes: vec![vec![3, 6], vec![6], vec![6]],
            f: Box::new(|t, x| {
                let y = t.layer_norm(x[0], x[1], x[2])?;
                project(t, y)
            }),
        },
        unary("gelu", &[10], |t, a| t.gelu(a)),
        unary("sigmoid", &[10], |t, a| t.sigmoid(a)),
        unary("tanh", &[10], |t, a| t.tanh(a)),
        unary("relu", &[10], |t, a| t.relu(a)),
        unary("embedding", &[7, 3], |t, a| t.embedding(a, &[1, 4, 4, 0, 6, 1], &[2, 3])),
        binary("concat_rows", &[2, 3], &[1, 3], |t, a, b| t.concat(a, b, 0)),
        binary("concat_cols", &[2, 3], &[2, 2], |t, a, b| t.concat(a, b, 1)),
        unary("slice", &[4, 5], |t, a| t.slice(a, 1, 1, 3)),
        unary("reshape", &[2, 6], |t, a| t.reshape(a, &[3, 4])),
        unary("permute", &[2, 3, 4], |t, a| t.permute(a, &[2, 0, 1])),
        unary("broadcast_batch", &[3, 4], |t, a| t.broadcast_batch(a, 2)),
        unary("rotary", &[2, 5, 4], |t, a| t.rotary(a, &[0, 3, 7, 11, 49], 10000.0)),
        Primitive {
            name: "cross_entropy",
            shapes: vec![vec![4, 6]],
            f: Box::new(|t, x| {
                let cols = [true, true, true, true, false, true];
                t.cross_entropy(x[0], &[0, 5, 2, 3], &[1.0, 0.5, 0.0, 2.0], 3.5, Some(&cols))
            }),
        },
        Primitive {
            name: "fan_out",
            shapes: vec![vec![4]],
            f: Box::new(|t, x| {
                let a = t.tanh(x[0])?;
                let b = t.mul(x[0], x[0])?;
                let y = t.add(a, b)?;
                project(t, y)
            }),
        },
    ]
}

/// Worst relative error of `op` over `points` random points in `[-2, 2]`.
pub fn primitive_error(op: &Primitive, points: usize, seed: u64) -> Result<f64, NumericsError> {
    let mut rng = seeded(seed);
    let mut worst = 0f64;
    for _ in 0..points {
        let inputs: Vec<Tensor<f64>> = op.shapes.iter().map(|s| random_point(s, 2.0, &mut rng)).collect();
        let r = check_gradients(|t, ids| (op.f)(t, ids), &inputs, 1e-5, Coordinates::All)?;
        worst = worst.max(r.max_relative_error);
    }
    Ok(worst)
}

/// Worst relative error of the next-token loss gradient with respect to every
/// parameter of `model` (64-bit), over the given coordinates.
pub fn model_gradient_error<M: SequenceModel>(model: &M, seqs: &[&[usize]], coords: Coordinates) -> Result<f64, NumericsError> {
    let params = model.params().cast::<f64>();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    let batch = Batch::new(seqs).expect("valid batch");
    let wrap = |e: &dyn std::fmt::Display| NumericsError::InvalidArgument { op: "model", detail: e.to_string() };
    let f = |tape: &mut Tape<f64>, ids: &[NodeId]| {
        let logits = model.logits_node(&params, ids, tape, &batch, None).map_err(|e| wrap(&e))?;
        clm_loss(tape, logits, &batch).map_err(|e| wrap(&e))
    };
    Ok(check_gradients(f, &inputs, 1e-5, coords)?.max_relative_error)
}

pub fn tiny_lstm(vocab: usize, width: usize, tied: bool, seed: u64) -> Lstm {
    let config = LstmConfig { tied, n_layers: 2, max_seq: 16, ..LstmConfig::small(vocab, width) };
    Lstm::new_random(config, seed).unwrap()
}

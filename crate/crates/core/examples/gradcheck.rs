//! Finite-difference check of reverse-mode gradients: a hand-built graph and
//! the next-token loss of a tiny transformer.

use medseq::model::{Batch, ModelConfig, SequenceModel, Transformer};
use medseq::numerics::{check_gradients, Coordinates, NumericsError, Tape, Tensor};
use medseq::training::clm_loss;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // sum(tanh(x·W) ∘ sigmoid(x))
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7])?;
    let w = Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64 * 0.7).cos()).collect())?;
    let r = check_gradients(
        |t: &mut Tape<f64>, ids| {
            let h = t.matmul(ids[0], ids[1])?;
            let h = t.tanh(h)?;
            let g = t.sigmoid(ids[0])?;
            let y = t.mul(h, g)?;
            t.sum(y)
        },
        &[x, w],
        1e-5,
        Coordinates::All,
    )?;
    println!("graph: {} coordinates, max relative error {:.2e}", r.checked, r.max_relative_error);

    let mut config = ModelConfig::small(50, 2, 2, 16);
    config.max_seq = 16;
    let model = Transformer::new_random(config, 0)?;
    let params = model.params().cast::<f64>();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    let batch = Batch::new(&[&[3, 17, 42, 8, 30], &[49, 0, 12]])?;
    let wrap = |e: &dyn std::fmt::Display| NumericsError::InvalidArgument { op: "model", detail: e.to_string() };
    let r = check_gradients(
        |tape, ids| {
            let logits = model.logits_node(&params, ids, tape, &batch, None).map_err(|e| wrap(&e))?;
            clm_loss(tape, logits, &batch).map_err(|e| wrap(&e))
        },
        &inputs,
        1e-5,
        Coordinates::Sample(20, 0),
    )?;
    println!("transformer: {} coordinates, max relative error {:.2e}", r.checked, r.max_relative_error);
    Ok(())
}

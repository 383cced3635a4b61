use super::{Ctx, Direction, QFCSpec, QLayerSpec};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::quant::LearnedBounds;

/// Raw (unquantized) parameters of one LSTM direction, bound on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CellParams {
    pub w: Var,
    pub r: Var,
    pub b: Var,
}

/// Cell parameters after weight fake-quantization. Biases pass through.
#[derive(Clone, Copy, Debug)]
pub struct QuantizedCell {
    pub w: Var,
    pub r: Var,
    pub b: Var,
}

/// Everything a layer needs from the parameter store.
#[derive(Clone, Debug)]
pub struct LayerBinding {
    /// One entry per direction, in [`Direction::names`] order.
    pub cells: Vec<CellParams>,
    pub input: Option<LearnedBounds>,
    pub hidden: Option<LearnedBounds>,
}

#[derive(Clone, Copy, Debug)]
pub struct FcBinding {
    pub w: Var,
    pub b: Var,
    pub act: Option<LearnedBounds>,
}

/// Quantize W and R once per forward pass.
pub fn quantize_cell<T: Real>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    cell: &CellParams,
    spec: &QLayerSpec,
) -> Result<QuantizedCell> {
    Ok(QuantizedCell {
        w: ctx.quantize(&format!("{name}.W"), cell.w, &spec.weight_q, None)?,
        r: ctx.quantize(&format!("{name}.R"), cell.r, &spec.weight_q, None)?,
        b: cell.b,
    })
}

/// One LSTM step. `x_t` and `h_prev` are quantized here, on every call;
/// `c_prev` and the returned cell state stay in full precision.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_step<T: Real>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    cell: &QuantizedCell,
    spec: &QLayerSpec,
    binding: &LayerBinding,
) -> Result<(Var, Var)> {
    let h = spec.hidden;
    let (xs, hs) = (ctx.tape.shape(x_t), ctx.tape.shape(h_prev));
    if xs.len() != 2 || xs[1] != spec.input_dim {
        return Err(Error::shape(
            "lstm_cell_step input",
            &xs,
            &[xs[0], spec.input_dim],
        ));
    }
    if hs != [xs[0], h] || ctx.tape.shape(c_prev) != hs {
        return Err(Error::shape("lstm_cell_step state", &hs, &[xs[0], h]));
    }
    let xq = ctx.quantize(&format!("{name}.input"), x_t, &spec.input_q, binding.input)?;
    let hq = ctx.quantize(
        &format!("{name}.hidden"),
        h_prev,
        &spec.hidden_q,
        binding.hidden,
    )?;

    let tape = ctx.tape;
    let pre = tape.add(tape.matmul_nt(xq, cell.w)?, tape.matmul_nt(hq, cell.r)?)?;
    let gates = tape.add_row(pre, cell.b)?;
    let i = tape.sigmoid(tape.slice_cols(gates, 0, h)?)?;
    let f = tape.sigmoid(tape.slice_cols(gates, h, h)?)?;
    let g = tape.tanh(tape.slice_cols(gates, 2 * h, h)?)?;
    let o = tape.sigmoid(tape.slice_cols(gates, 3 * h, h)?)?;
    let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, g)?)?;
    let h_t = tape.mul(o, tape.tanh(c)?)?;
    Ok((h_t, c))
}

/// Run a (possibly bidirectional) layer over a time-major sequence of
/// `batch × input_dim` steps. Dropout is applied to each input step before
/// quantization; directions are concatenated as `[forward, backward]`.
pub fn run_layer<T: Real>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    xs: &[Var],
    spec: &QLayerSpec,
    binding: &LayerBinding,
) -> Result<Vec<Var>> {
    let dirs = spec.direction.names();
    if binding.cells.len() != dirs.len() {
        return Err(Error::invalid(format!(
            "{name}: {} parameter sets for {} directions",
            binding.cells.len(),
            dirs.len()
        )));
    }
    let Some(&first) = xs.first() else {
        return Err(Error::invalid(format!("{name}: empty sequence")));
    };
    let batch = ctx.tape.shape(first)[0];

    let mut inputs = Vec::with_capacity(xs.len());
    for &x in xs {
        inputs.push(
            ctx.tape
                .dropout(x, spec.dropout_p, &mut ctx.rng, ctx.training)?,
        );
    }

    let mut per_dir: Vec<Vec<Var>> = Vec::with_capacity(dirs.len());
    for (dir, cell) in dirs.iter().zip(&binding.cells) {
        let qcell = quantize_cell(ctx, &format!("{name}.{dir}"), cell, spec)?;
        let reverse = *dir == "bwd";
        let zeros = Tensor::zeros(&[batch, spec.hidden]);
        let mut h = ctx.tape.constant(zeros.clone());
        let mut c = ctx.tape.constant(zeros);
        let mut outs = vec![h; xs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..xs.len()).rev())
        } else {
            Box::new(0..xs.len())
        };
        for t in order {
            (h, c) = lstm_cell_step(ctx, name, inputs[t], h, c, &qcell, spec, binding)?;
            outs[t] = h;
        }
        per_dir.push(outs);
    }

    if spec.direction != Direction::Bidirectional {
        return Ok(per_dir.pop().unwrap());
    }
    (0..xs.len())
        .map(|t| ctx.tape.concat_cols(&[per_dir[0][t], per_dir[1][t]]))
        .collect()
}

/// Fully connected layer with quantized input activations and weights.
pub fn run_fc<T: Real>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    x: Var,
    spec: &QFCSpec,
    binding: &FcBinding,
) -> Result<Var> {
    let xs = ctx.tape.shape(x);
    if xs.len() != 2 || xs[1] != spec.in_dim {
        return Err(Error::shape("run_fc", &xs, &[xs[0], spec.in_dim]));
    }
    let xq = ctx.quantize(&format!("{name}.input"), x, &spec.act_q, binding.act)?;
    let wq = ctx.quantize(&format!("{name}.W"), binding.w, &spec.weight_q, None)?;
    let tape = ctx.tape;
    tape.add_row(tape.matmul_nt(xq, wq)?, binding.b)
}

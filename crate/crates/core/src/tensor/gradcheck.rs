//! Central finite-difference checks for every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MdnBatch, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Worst disagreement between analytic and numeric gradients for one op.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub elements: usize,
}

/// Relative error with a unit floor on the denominator, so gradients far
/// below the finite-difference noise floor are judged absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `build` at `inputs` against central differences with step `h`.
/// The scalar probed is `sum(w * out)` with fixed random weights `w`.
pub fn check<T: Scalar>(
    op: &'static str,
    inputs: &[Tensor<T>],
    h: f64,
    build: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let forward = |inputs: &[Tensor<T>], grad: bool| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = forward(inputs, true)?;
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let probe = |t: &Tape<T>, out: Var| -> f64 {
        t.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v.as_f64() * w)
            .sum()
    };
    let w = tape.constant(Tensor::from_f64(&shape, &weights)?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut elements = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[k]) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; input.numel()],
        };
        for j in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            let base = input.data()[j].as_f64();
            shifted[k].data_mut()[j] = T::from_f64(base + h);
            let (tp, _, op_) = forward(&shifted, false)?;
            let plus = probe(&tp, op_);
            shifted[k].data_mut()[j] = T::from_f64(base - h);
            let (tm, _, om) = forward(&shifted, false)?;
            let minus = probe(&tm, om);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
            elements += 1;
        }
    }
    Ok(GradCheck {
        op,
        max_rel_err: worst,
        elements,
    })
}

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

/// Values bounded away from zero so ReLU kinks stay outside `±h`.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                u
            } else {
                -u
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

/// Distinct values spaced 0.05 apart so pooling windows have clear maxima.
fn distinct<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data: Vec<f64> = order.iter().map(|k| *k as f64 * 0.05 - 1.0).collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

/// Runs the check for every differentiable op with step `h`.
pub fn suite<T: Scalar>(h: f64, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = random::<T>(&mut rng, &[1, 2, 6, 6], 1.0);
    let w = random::<T>(&mut rng, &[3, 2, 3, 3], 0.5);
    let b = random::<T>(&mut rng, &[3], 0.5);
    out.push(check("conv2d 3x3 same", &[x.clone(), w.clone(), b], h, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    })?);
    out.push(check("conv2d 3x3 stride 2", &[x.clone(), w], h, |t, v| {
        t.conv2d(v[0], v[1], None, 2, 1)
    })?);
    let w1 = random::<T>(&mut rng, &[4, 2, 1, 1], 0.5);
    let b1 = random::<T>(&mut rng, &[4], 0.5);
    out.push(check("conv2d 1x1", &[x, w1, b1], h, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 0)
    })?);
    let xp = distinct::<T>(&mut rng, &[1, 2, 6, 6]);
    out.push(check("max_pool2d", &[xp], h, |t, v| t.max_pool2d(v[0], 2, 2))?);
    let xs = random::<T>(&mut rng, &[1, 2, 3, 2], 1.0);
    out.push(check("upsample_bilinear", &[xs], h, |t, v| t.upsample_bilinear(v[0], 2))?);
    let xg = random::<T>(&mut rng, &[2, 4, 3, 3], 1.0);
    let gamma = random::<T>(&mut rng, &[4], 1.0);
    let beta = random::<T>(&mut rng, &[4], 1.0);
    out.push(check("group_norm", &[xg, gamma, beta], h, |t, v| t.group_norm(v[0], v[1], v[2], 2))?);
    let xr = away_from_zero::<T>(&mut rng, &[2, 3, 4]);
    out.push(check("relu", &[xr], h, |t, v| Ok(t.relu(v[0])))?);
    let xe = random::<T>(&mut rng, &[2, 3, 4], 1.5);
    out.push(check("sigmoid", std::slice::from_ref(&xe), h, |t, v| Ok(t.sigmoid(v[0])))?);
    out.push(check("tanh", std::slice::from_ref(&xe), h, |t, v| Ok(t.tanh(v[0])))?);
    out.push(check("exp", std::slice::from_ref(&xe), h, |t, v| Ok(t.exp(v[0])))?);
    out.push(check("scale", std::slice::from_ref(&xe), h, |t, v| Ok(t.scale(v[0], T::from_f64(-1.7))))?);
    let ya = random::<T>(&mut rng, &[2, 3, 4], 1.5);
    out.push(check("add", &[xe.clone(), ya.clone()], h, |t, v| t.add(v[0], v[1]))?);
    out.push(check("sub", &[xe.clone(), ya.clone()], h, |t, v| t.sub(v[0], v[1]))?);
    out.push(check("mul", &[xe.clone(), ya.clone()], h, |t, v| t.mul(v[0], v[1]))?);
    let xc = random::<T>(&mut rng, &[2, 1, 3, 2], 1.0);
    let yc = random::<T>(&mut rng, &[2, 2, 3, 2], 1.0);
    out.push(check("concat", &[xc, yc.clone()], h, |t, v| t.concat(&[v[0], v[1]]))?);
    out.push(check("slice", &[yc], h, |t, v| t.slice(v[0], 1, 1))?);
    let xl = random::<T>(&mut rng, &[2, 2, 3, 4], 2.0);
    out.push(check("log_softmax_spatial", &[xl], h, |t, v| t.log_softmax_spatial(v[0]))?);
    let xm = random::<T>(&mut rng, &[3, 5], 2.0);
    out.push(check("log_softmax_last", &[xm], h, |t, v| t.log_softmax_last(v[0]))?);
    let xa = random::<T>(&mut rng, &[2, 3, 2, 2], 1.0);
    out.push(check("global_avg_pool", &[xa], h, |t, v| t.global_avg_pool(v[0]))?);
    let xb = random::<T>(&mut rng, &[3], 1.0);
    out.push(check("broadcast_planes", &[xb], h, |t, v| t.broadcast_planes(v[0], 2, 2, 3))?);
    let xi = random::<T>(&mut rng, &[2, 5], 1.0);
    let wi = random::<T>(&mut rng, &[3, 5], 1.0);
    let bi = random::<T>(&mut rng, &[3], 1.0);
    out.push(check("linear", &[xi, wi, bi], h, |t, v| t.linear(v[0], v[1], v[2]))?);
    let xk = random::<T>(&mut rng, &[2, 6], 1.0);
    out.push(check("pick", std::slice::from_ref(&xk), h, |t, v| t.pick(v[0], &[0, 3, 3, 11]))?);
    out.push(check("sum", std::slice::from_ref(&xk), h, |t, v| Ok(t.sum(v[0])))?);
    out.push(check("mean", &[xk], h, |t, v| Ok(t.mean(v[0])))?);

    let (components, horizon, n) = (3, 2, 2);
    let mut raw = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n * horizon {
        for _ in 0..components {
            raw.extend([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.8..0.8),
                rng.random_range(-1.0..1.0),
            ]);
        }
        targets.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    }
    let batch = MdnBatch {
        components,
        horizon,
        sigma_eps: 1e-2,
        clip: 50.0,
        mask: vec![true, true, false, true],
        targets,
    };
    let xmdn = Tensor::<T>::from_f64(&[n, horizon * components * 6], &raw)?;
    out.push(check("mdn_nll", &[xmdn], h, |t, v| Ok(t.mdn_nll(v[0], &batch)?.0))?);
    Ok(out)
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::structural(
            "relu",
            "grad_out shape differs from input",
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// `[N, C, H, W]` to `[N, C]`.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::structural(
            "global_avg_pool",
            "input shape must be 4-D",
        ));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::structural(
            "global_avg_pool",
            "grad_out must be [N, C]",
        ));
    }
    let plane = h * w;
    let scale = 1.0 / plane as f32;
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::from_vec(input_shape, data)
}

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }
}

fn linear_dims(input: &Tensor, p: &LinearParams) -> Result<(usize, usize, usize)> {
    let [n, fin] = input.shape()[..] else {
        return Err(Error::structural("linear", "input must be [N, in]"));
    };
    let [fout, win] = p.weight.shape()[..] else {
        return Err(Error::structural("linear", "weight must be [out, in]"));
    };
    if win != fin || p.bias.shape() != [fout] {
        return Err(Error::structural(
            "linear",
            format!(
                "input width {fin} vs weight {:?} / bias {:?}",
                p.weight.shape(),
                p.bias.shape()
            ),
        ));
    }
    Ok((n, fin, fout))
}

pub fn linear_forward(input: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (n, fin, fout) = linear_dims(input, p)?;
    let x = input.data();
    let w = p.weight.data();
    let mut out = Vec::with_capacity(n * fout);
    for b in 0..n {
        let row = &x[b * fin..(b + 1) * fin];
        for o in 0..fout {
            let wr = &w[o * fin..(o + 1) * fin];
            let dot: f64 = row.iter().zip(wr).map(|(&a, &c)| a as f64 * c as f64).sum();
            out.push((dot + p.bias.data()[o] as f64) as f32);
        }
    }
    let out = Tensor::from_vec(&[n, fout], out)?;
    out.debug_assert_finite("linear_forward");
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    p: &LinearParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, fin, fout) = linear_dims(input, p)?;
    if grad_out.shape() != [n, fout] {
        return Err(Error::structural("linear", "grad_out must be [N, out]"));
    }
    let x = input.data();
    let w = p.weight.data();
    let gy = grad_out.data();

    let mut gx = vec![0f32; n * fin];
    for b in 0..n {
        for i in 0..fin {
            let s: f64 = (0..fout)
                .map(|o| gy[b * fout + o] as f64 * w[o * fin + i] as f64)
                .sum();
            gx[b * fin + i] = s as f32;
        }
    }
    let mut gw = vec![0f32; fout * fin];
    let mut gb = vec![0f32; fout];
    for o in 0..fout {
        for i in 0..fin {
            let s: f64 = (0..n)
                .map(|b| gy[b * fout + o] as f64 * x[b * fin + i] as f64)
                .sum();
            gw[o * fin + i] = s as f32;
        }
        gb[o] = (0..n).map(|b| gy[b * fout + o] as f64).sum::<f64>() as f32;
    }
    Ok((
        Tensor::from_vec(&[n, fin], gx)?,
        Tensor::from_vec(&[fout, fin], gw)?,
        Tensor::from_vec(&[fout], gb)?,
    ))
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, k] = logits.shape()[..] else {
        return Err(Error::structural(
            "softmax_cross_entropy",
            "logits must be [N, K]",
        ));
    };
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let z = logits.data();
    let mut grad = vec![0f32; n * k];
    let mut loss = 0f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Data(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = &z[b * k..(b + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() + max - row[label] as f64;
        for c in 0..k {
            let p = exps[c] / total;
            let t = if c == label { 1.0 } else { 0.0 };
            grad[b * k + c] = ((p - t) / n as f64) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::from_vec(&[n, k], grad)?))
}

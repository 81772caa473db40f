use rand_distr::{Distribution, Uniform};

use super::tensor::{accumulate_affine_grads, affine_rows, backprop_rows, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    /// Row-wise softmax.
    Softmax,
}

/// One stage of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    Act(Activation),
    /// Feature-wise affine modulation driven by the conditioning vector:
    /// `y = (1 + s) ⊙ x + h` where `[s, h] = cond · W + b`.
    Film { features: usize, cond: usize },
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A feed-forward network with its parameters stored in one flat vector.
///
/// Named views over the flat storage (`"{layer}.weight"`, `"{layer}.bias"`)
/// are what the checkpoint format records.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    cond_dim: Option<usize>,
    slots: Vec<Slot>,
    /// `(weight slot, bias slot)` for parameterised layers.
    layer_slots: Vec<Option<(usize, usize)>>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`Network::backward_tape`].
#[derive(Clone, Debug)]
pub struct Tape {
    rows: usize,
    /// `acts[i]` is the input to layer `i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    /// FiLM modulation `[s, h]` per layer, where applicable.
    film: Vec<Option<Vec<f64>>>,
    cond: Option<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl Network {
    /// Validates the layer stack and allocates zero parameters.
    pub fn zeros(layers: Vec<Layer>) -> Result<Self> {
        let input_dim = match layers.first() {
            Some(Layer::Dense { inputs, .. }) => *inputs,
            Some(Layer::Film { features, .. }) => *features,
            Some(Layer::Act(_)) | None => {
                return Err(Error::usage("network must start with a dense or film layer"))
            }
        };
        let mut width = input_dim;
        let mut cond_dim = None;
        let mut slots = Vec::new();
        let mut layer_slots = Vec::with_capacity(layers.len());
        let mut offset = 0;
        let mut push = |slots: &mut Vec<Slot>, name: String, shape: Vec<usize>| {
            let s = Slot {
                name,
                shape,
                offset,
            };
            offset += s.len();
            slots.push(s);
            slots.len() - 1
        };
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::usage(format!("layer {i}: zero-width dense layer")));
                    }
                    if inputs != width {
                        return Err(Error::shape(format!("layer {i} (dense)"), width, inputs));
                    }
                    let w = push(&mut slots, format!("{i}.weight"), vec![inputs, outputs]);
                    let b = push(&mut slots, format!("{i}.bias"), vec![outputs]);
                    layer_slots.push(Some((w, b)));
                    width = outputs;
                }
                Layer::Film { features, cond } => {
                    if features != width {
                        return Err(Error::shape(format!("layer {i} (film)"), width, features));
                    }
                    match cond_dim {
                        Some(c) if c != cond => {
                            return Err(Error::shape(format!("layer {i} (film cond)"), c, cond))
                        }
                        _ => cond_dim = Some(cond),
                    }
                    let w = push(&mut slots, format!("{i}.weight"), vec![cond, 2 * features]);
                    let b = push(&mut slots, format!("{i}.bias"), vec![2 * features]);
                    layer_slots.push(Some((w, b)));
                }
                Layer::Act(_) => layer_slots.push(None),
            }
        }
        Ok(Network {
            layers,
            input_dim,
            cond_dim,
            slots,
            layer_slots,
            params: vec![0.0; offset],
        })
    }

    /// Scaled-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layers: Vec<Layer>, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        for li in 0..net.layers.len() {
            if let Some((w, _)) = net.layer_slots[li] {
                let slot = net.slots[w].clone();
                let (fan_in, fan_out) = (slot.shape[0], slot.shape[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                for p in &mut net.params[slot.offset..slot.offset + slot.len()] {
                    *p = dist.sample(rng);
                }
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        let mut width = self.input_dim;
        for layer in &self.layers {
            if let Layer::Dense { outputs, .. } = layer {
                width = *outputs;
            }
        }
        width
    }

    /// Width of the conditioning vector, if the network has FiLM layers.
    pub fn cond_dim(&self) -> Option<usize> {
        self.cond_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Names and shapes of the parameter tensors, in storage order.
    pub fn param_names(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.slots.iter().map(|s| (s.name.as_str(), s.shape.as_slice()))
    }

    /// Copy of a named parameter tensor.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.slots.iter().find(|s| s.name == name).map(|s| {
            Tensor::from_parts_unchecked(
                s.shape.clone(),
                self.params[s.offset..s.offset + s.len()].to_vec(),
            )
        })
    }

    pub fn param_slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.slots.iter().find(|s| s.name == name)?;
        let (o, n) = (s.offset, s.len());
        Some(&mut self.params[o..o + n])
    }

    /// Splits a flat gradient into named tensors matching the parameters.
    pub fn named(&self, flat: &[f64]) -> Result<Vec<(String, Tensor)>> {
        if flat.len() != self.params.len() {
            return Err(Error::shape("named gradient", self.params.len(), flat.len()));
        }
        Ok(self
            .slots
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    Tensor::from_parts_unchecked(
                        s.shape.clone(),
                        flat[s.offset..s.offset + s.len()].to_vec(),
                    ),
                )
            })
            .collect())
    }

    /// Overwrites parameters from named tensors; names and shapes must match exactly.
    pub fn set_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.slots.len() {
            return Err(Error::shape("parameter count", self.slots.len(), tensors.len()));
        }
        for (slot, (name, t)) in self.slots.iter().zip(tensors) {
            if &slot.name != name {
                return Err(Error::shape("parameter name", &slot.name, name));
            }
            if slot.shape != t.shape() {
                return Err(Error::shape(
                    format!("parameter {name}"),
                    format!("{:?}", slot.shape),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        for (slot, (_, t)) in self.slots.iter().zip(tensors) {
            self.params[slot.offset..slot.offset + slot.len()].copy_from_slice(t.data());
        }
        Ok(())
    }

    fn slot(&self, idx: usize) -> &[f64] {
        let s = &self.slots[idx];
        &self.params[s.offset..s.offset + s.len()]
    }

    fn check_inputs(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<usize> {
        if input.cols() != self.input_dim {
            return Err(Error::shape("layer 0 input", self.input_dim, input.cols()));
        }
        let rows = input.len() / self.input_dim;
        match (self.cond_dim, cond) {
            (Some(c), Some(ct)) => {
                if ct.cols() != c || ct.len() != rows * c {
                    return Err(Error::shape(
                        "film conditioning",
                        format!("{rows}x{c}"),
                        format!("{:?}", ct.shape()),
                    ));
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::usage("network has film layers but no conditioning was given"))
            }
            (None, Some(_)) => {
                return Err(Error::usage("conditioning given to a network without film layers"))
            }
        }
        Ok(rows)
    }

    /// Forward pass over a batch of rows.
    pub fn forward(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let rows = self.check_inputs(input, cond)?;
        let mut cur = input.data().to_vec();
        let mut width = self.input_dim;
        for (li, layer) in self.layers.iter().enumerate() {
            let (next, w) = self.layer_forward(li, layer, &cur, width, rows, cond, None);
            cur = next;
            width = w;
        }
        Ok(Tensor::from_parts_unchecked(vec![rows, width], cur))
    }

    /// Forward pass that keeps every intermediate for a later backward pass.
    pub fn forward_tape(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<Tape> {
        let rows = self.check_inputs(input, cond)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut film = Vec::with_capacity(self.layers.len());
        acts.push(input.data().to_vec());
        let mut width = self.input_dim;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut modulation = None;
            let (next, w) = self.layer_forward(
                li,
                layer,
                acts.last().expect("non-empty"),
                width,
                rows,
                cond,
                Some(&mut modulation),
            );
            film.push(modulation);
            acts.push(next);
            width = w;
        }
        Ok(Tape {
            rows,
            acts,
            film,
            cond: cond.map(|c| c.data().to_vec()),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        li: usize,
        layer: &Layer,
        x: &[f64],
        width: usize,
        rows: usize,
        cond: Option<&Tensor>,
        keep_film: Option<&mut Option<Vec<f64>>>,
    ) -> (Vec<f64>, usize) {
        match *layer {
            Layer::Dense { inputs, outputs } => {
                let (w, b) = self.layer_slots[li].expect("dense has params");
                let mut out = vec![0.0; rows * outputs];
                affine_rows(x, inputs, self.slot(w), self.slot(b), &mut out);
                (out, outputs)
            }
            Layer::Act(act) => {
                let mut out = x.to_vec();
                match act {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Softmax => {
                        for row in out.chunks_exact_mut(width) {
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut sum = 0.0;
                            for v in row.iter_mut() {
                                *v = (*v - max).exp();
                                sum += *v;
                            }
                            row.iter_mut().for_each(|v| *v /= sum);
                        }
                    }
                }
                (out, width)
            }
            Layer::Film { features, cond: cd } => {
                let (w, b) = self.layer_slots[li].expect("film has params");
                let c = cond.expect("checked by check_inputs").data();
                let mut m = vec![0.0; rows * 2 * features];
                affine_rows(c, cd, self.slot(w), self.slot(b), &mut m);
                let mut out = vec![0.0; rows * features];
                for ((y, xr), mr) in out
                    .chunks_exact_mut(features)
                    .zip(x.chunks_exact(features))
                    .zip(m.chunks_exact(2 * features))
                {
                    let (s, h) = mr.split_at(features);
                    for j in 0..features {
                        y[j] = (1.0 + s[j]) * xr[j] + h[j];
                    }
                }
                if let Some(slot) = keep_film {
                    *slot = Some(m);
                }
                (out, features)
            }
        }
    }

    /// Gradients of `<out_grad, forward(input, cond)>` with respect to the flat
    /// parameter vector and the input.
    pub fn backward(
        &self,
        input: &Tensor,
        cond: Option<&Tensor>,
        out_grad: &Tensor,
    ) -> Result<(Vec<f64>, Tensor)> {
        let tape = self.forward_tape(input, cond)?;
        let mut grads = vec![0.0; self.params.len()];
        let dx = self.backward_tape(&tape, out_grad.data(), &mut grads)?;
        Ok((grads, Tensor::from_parts_unchecked(input.shape().to_vec(), dx)))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_tape(&self, tape: &Tape, out_grad: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if out_grad.len() != tape.output().len() {
            return Err(Error::shape(
                format!("layer {} output gradient", self.layers.len().saturating_sub(1)),
                tape.output().len(),
                out_grad.len(),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape("parameter gradient buffer", self.params.len(), grads.len()));
        }
        let rows = tape.rows;
        let mut g = out_grad.to_vec();
        for li in (0..self.layers.len()).rev() {
            let x = &tape.acts[li];
            let y = &tape.acts[li + 1];
            g = match self.layers[li] {
                Layer::Dense { inputs, outputs } => {
                    let (w, b) = self.layer_slots[li].expect("dense has params");
                    let (wo, bo) = (self.slots[w].offset, self.slots[b].offset);
                    {
                        let (head, tail) = grads.split_at_mut(bo);
                        accumulate_affine_grads(
                            x,
                            inputs,
                            &g,
                            outputs,
                            &mut head[wo..wo + inputs * outputs],
                            &mut tail[..outputs],
                        );
                    }
                    let mut dx = vec![0.0; rows * inputs];
                    backprop_rows(&g, outputs, self.slot(w), inputs, &mut dx);
                    dx
                }
                Layer::Act(Activation::Tanh) => {
                    g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect()
                }
                Layer::Act(Activation::Relu) => g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
                Layer::Act(Activation::Softmax) => {
                    let width = if rows == 0 { 0 } else { y.len() / rows };
                    let mut dx = vec![0.0; g.len()];
                    for ((dxr, gr), yr) in dx
                        .chunks_exact_mut(width)
                        .zip(g.chunks_exact(width))
                        .zip(y.chunks_exact(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            dxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    dx
                }
                Layer::Film { features, cond: cd } => {
                    let (w, b) = self.layer_slots[li].expect("film has params");
                    let m = tape.film[li].as_ref().expect("film modulation recorded");
                    let c = tape.cond.as_ref().expect("film conditioning recorded");
                    let mut dm = vec![0.0; rows * 2 * features];
                    let mut dx = vec![0.0; rows * features];
                    for r in 0..rows {
                        let gr = &g[r * features..(r + 1) * features];
                        let xr = &x[r * features..(r + 1) * features];
                        let s = &m[r * 2 * features..r * 2 * features + features];
                        let dmr = &mut dm[r * 2 * features..(r + 1) * 2 * features];
                        for j in 0..features {
                            dx[r * features + j] = gr[j] * (1.0 + s[j]);
                            dmr[j] = gr[j] * xr[j];
                            dmr[features + j] = gr[j];
                        }
                    }
                    let (wo, bo) = (self.slots[w].offset, self.slots[b].offset);
                    let (head, tail) = grads.split_at_mut(bo);
                    accumulate_affine_grads(
                        c,
                        cd,
                        &dm,
                        2 * features,
                        &mut head[wo..wo + cd * 2 * features],
                        &mut tail[..2 * features],
                    );
                    dx
                }
            };
        }
        Ok(g)
    }
}

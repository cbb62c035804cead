//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Graph`] is built fresh for each forward pass. Nodes are appended in
//! evaluation order, so the reverse sweep is a single backwards walk over the
//! node list. Parameters enter the graph as leaves tagged with their
//! [`ParamId`]; after [`Graph::backward`] their gradients are read back with
//! [`Gradients::param_grads`].

use crate::error::{invalid, Result};
use crate::ops::{self, BnSaved};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Scalar whose local gradients with respect to `inputs` were computed
    /// analytically by the caller.
    Scalar {
        inputs: Vec<Var>,
        local_grads: Vec<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn max_pool(&mut self, input: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool(self.value(input), k, stride, pad)?;
        Ok(self.push(y, Op::MaxPool { input, argmax }))
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(input), factor)?;
        Ok(self.push(y, Op::Upsample { input, factor }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn concat_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| invalid("concat_channels", "nothing to concatenate"))?;
        rest.iter().try_fold(first, |acc, &p| self.concat(acc, p))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(input).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { input, start }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let y = ops::global_avg_pool(self.value(input));
        self.push(y, Op::GlobalAvgPool { input })
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::dense_fc(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(y, Op::Dense { input, weight, bias }))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let y = ops::leaky_relu(self.value(input), slope);
        self.push(y, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = ops::sigmoid(self.value(input));
        self.push(y, Op::Sigmoid { input })
    }

    /// Returns the output and the batch mean/variance used, for running-stat updates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, saved) = ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let v = self.push(
            y,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            },
        );
        Ok((v, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
    ) -> Result<Var> {
        let (y, inv_std) =
            ops::batch_norm_eval(self.value(input), self.value(gamma), self.value(beta), mean, var)?;
        Ok(self.push(
            y,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.data().to_vec(),
                inv_std,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Records a scalar computed outside the graph together with its exact
    /// partial derivatives with respect to each input node.
    pub fn scalar(&mut self, value: T, inputs: Vec<Var>, local_grads: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != local_grads.len() {
            return Err(invalid("scalar", "one gradient buffer per input required"));
        }
        for (v, g) in inputs.iter().zip(&local_grads) {
            if self.value(*v).numel() != g.len() {
                return Err(invalid(
                    "scalar",
                    format!("gradient length {} does not match {}", g.len(), self.shape(*v)),
                ));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs,
                local_grads,
            },
        ))
    }

    /// Reverse sweep from a 1×1×1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(invalid(
                "backward",
                format!("loss must be a scalar, got {}", ls),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let g = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &gout,
                        node.value.shape(),
                        *stride,
                        *pad,
                    );
                    acc(&mut grads, *input, g.input);
                    acc(&mut grads, *weight, g.weight);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, g.bias);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let g = ops::max_pool_backward(self.value(*input).numel(), argmax, &gout);
                    acc(&mut grads, *input, g);
                }
                Op::Upsample { input, factor } => {
                    let g = ops::upsample_nearest_backward(self.shape(*input), *factor, &gout);
                    acc(&mut grads, *input, g);
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::concat_channels_backward(self.shape(*a), self.shape(*b), &gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SliceChannels { input, start } => {
                    let is = self.shape(*input);
                    let os = node.value.shape();
                    let mut g = vec![T::zero(); is.numel()];
                    let len = os.c * os.plane();
                    for n in 0..is.n {
                        let dst = is.index(n, *start, 0, 0);
                        g[dst..dst + len].copy_from_slice(&gout[n * len..(n + 1) * len]);
                    }
                    acc(&mut grads, *input, g);
                }
                Op::GlobalAvgPool { input } => {
                    let g = ops::global_avg_pool_backward(self.shape(*input), &gout);
                    acc(&mut grads, *input, g);
                }
                Op::Dense { input, weight, bias } => {
                    let (gi, gw, gb) = ops::dense_fc_backward(self.value(*input), self.value(*weight), &gout);
                    acc(&mut grads, *input, gi);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *bias, gb);
                }
                Op::LeakyRelu { input, slope } => {
                    let g = ops::leaky_relu_backward(self.value(*input), *slope, &gout);
                    acc(&mut grads, *input, g);
                }
                Op::Sigmoid { input } => {
                    let g = ops::sigmoid_backward(&node.value, &gout);
                    acc(&mut grads, *input, g);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, gg, gb) =
                        ops::batch_norm_train_backward(self.shape(*input), self.value(*gamma), saved, &gout);
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let s = self.shape(*input);
                    let x = self.value(*input).data();
                    let gm = self.value(*gamma).data();
                    let mut gx = vec![T::zero(); s.numel()];
                    let mut gg = vec![T::zero(); s.c];
                    let mut gb = vec![T::zero(); s.c];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let b = s.index(n, c, 0, 0);
                            for i in b..b + s.plane() {
                                gx[i] = gout[i] * gm[c] * inv_std[c];
                                gg[c] += gout[i] * (x[i] - mean[c]) * inv_std[c];
                                gb[c] += gout[i];
                            }
                        }
                    }
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout);
                }
                Op::Scalar {
                    inputs,
                    local_grads,
                } => {
                    let up = gout[0];
                    for (v, lg) in inputs.iter().zip(local_grads) {
                        acc(&mut grads, *v, lg.iter().map(|&g| g * up).collect());
                    }
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf (input or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients, summed over every leaf that referenced the same parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = Vec::new();
        for &(id, v) in &self.params {
            let Some(g) = self.grads[v.0].as_ref() else {
                continue;
            };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => out.push((id, g.clone())),
            }
        }
        out
    }

    /// Accumulates parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).accumulate_grad(&g);
        }
    }
}

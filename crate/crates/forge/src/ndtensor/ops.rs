//! Elementwise operations and reductions with their gradient rules.

use std::sync::Arc;

use super::{s, GradBufs, Scalar, Tensor};
use crate::{Error, Result};

impl<S: Scalar> Tensor<S> {
    fn check_same_shape(&self, other: &Tensor<S>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "add")?;
        let out: Vec<S> = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        let (aid, bid) = (self.node_id(), other.node_id());
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self, other],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for (gv, &go) in ga.iter_mut().zip(g) {
                        *gv += go;
                    }
                }
                if let Some(id) = bid {
                    let gb = bufs.acc(id, n);
                    for (gv, &go) in gb.iter_mut().zip(g) {
                        *gv += go;
                    }
                }
            },
            "add",
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "sub")?;
        let out: Vec<S> = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        let (aid, bid) = (self.node_id(), other.node_id());
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self, other],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for (gv, &go) in ga.iter_mut().zip(g) {
                        *gv += go;
                    }
                }
                if let Some(id) = bid {
                    let gb = bufs.acc(id, n);
                    for (gv, &go) in gb.iter_mut().zip(g) {
                        *gv -= go;
                    }
                }
            },
            "sub",
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "mul")?;
        let out: Vec<S> = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (aid, bid) = (self.node_id(), other.node_id());
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&other.data);
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self, other],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        ga[i] += g[i] * b[i];
                    }
                }
                if let Some(id) = bid {
                    let gb = bufs.acc(id, n);
                    for i in 0..n {
                        gb[i] += g[i] * a[i];
                    }
                }
            },
            "mul",
        )
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "div")?;
        let out: Vec<S> = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        let (aid, bid) = (self.node_id(), other.node_id());
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&other.data);
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self, other],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        ga[i] += g[i] / b[i];
                    }
                }
                if let Some(id) = bid {
                    let gb = bufs.acc(id, n);
                    for i in 0..n {
                        gb[i] -= g[i] * a[i] / (b[i] * b[i]);
                    }
                }
            },
            "div",
        )
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v + c).collect();
        let aid = self.node_id();
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for (gv, &go) in ga.iter_mut().zip(g) {
                        *gv += go;
                    }
                }
            },
            "add_scalar",
        )
        .expect("add_scalar cannot fail")
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        let aid = self.node_id();
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for (gv, &go) in ga.iter_mut().zip(g) {
                        *gv += go * c;
                    }
                }
            },
            "mul_scalar",
        )
        .expect("mul_scalar cannot fail")
    }

    pub fn neg(&self) -> Tensor<S> {
        self.mul_scalar(-S::one())
    }

    /// Natural logarithm. Callers clamp probabilities before taking logs.
    pub fn ln(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v.ln()).collect();
        let aid = self.node_id();
        let x = Arc::clone(&self.data);
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        ga[i] += g[i] / x[i];
                    }
                }
            },
            "ln",
        )
        .expect("ln cannot fail")
    }

    pub fn exp(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v.exp()).collect();
        let aid = self.node_id();
        let y = out.clone();
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        ga[i] += g[i] * y[i];
                    }
                }
            },
            "exp",
        )
        .expect("exp cannot fail")
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, k: f64) -> Tensor<S> {
        let ks = s::<S>(k);
        let out: Vec<S> = self.data().iter().map(|&v| v.powf(ks)).collect();
        let aid = self.node_id();
        let x = Arc::clone(&self.data);
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        ga[i] += g[i] * ks * x[i].powf(ks - S::one());
                    }
                }
            },
            "powf",
        )
        .expect("powf cannot fail")
    }

    pub fn relu(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let aid = self.node_id();
        let x = Arc::clone(&self.data);
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        if x[i] > S::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            },
            "relu",
        )
        .expect("relu cannot fail")
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| S::one() / (S::one() + (-v).exp()))
            .collect();
        let aid = self.node_id();
        let y = out.clone();
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        ga[i] += g[i] * y[i] * (S::one() - y[i]);
                    }
                }
            },
            "sigmoid",
        )
        .expect("sigmoid cannot fail")
    }

    /// Clamp to `[lo, hi]`; gradient is passed through strictly inside the
    /// interval and zero outside (and at the boundary).
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        let aid = self.node_id();
        let x = Arc::clone(&self.data);
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let ga = bufs.acc(id, n);
                    for i in 0..n {
                        if x[i] > lo && x[i] < hi {
                            ga[i] += g[i];
                        }
                    }
                }
            },
            "clamp",
        )
        .expect("clamp cannot fail")
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data() {
            acc += v;
        }
        let aid = self.node_id();
        let n = self.len();
        Tensor::make(
            vec![acc],
            vec![1],
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = aid {
                    let go = g[0];
                    let ga = bufs.acc(id, n);
                    for gv in ga.iter_mut() {
                        *gv += go;
                    }
                }
            },
            "sum_all",
        )
        .expect("sum_all cannot fail")
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.len();
        self.sum_all().mul_scalar(s::<S>(1.0 / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tape};
    use super::*;

    #[test]
    fn div_gradients() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(vec![6.0], &[1]).unwrap();
        let b = tape.var(vec![2.0], &[1]).unwrap();
        let y = a.div(&b).unwrap();
        backward(&y).unwrap();
        assert!((a.grad().unwrap().data()[0] - 0.5).abs() < 1e-12);
        assert!((b.grad().unwrap().data()[0] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn mixed_tracked_and_constant() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(vec![2.0, 3.0], &[2]).unwrap();
        let c = Tensor::from_vec(vec![10.0, 20.0], &[2]).unwrap();
        let y = a.mul(&c).unwrap().sum_all();
        backward(&y).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[10.0, 20.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(vec![-1.0, 0.5, 2.0], &[3]).unwrap();
        let y = a.clamp(0.0, 1.0).sum_all();
        backward(&y).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn mean_all_gradient_is_uniform() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let y = a.mean_all();
        backward(&y).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.25; 4]);
    }
}

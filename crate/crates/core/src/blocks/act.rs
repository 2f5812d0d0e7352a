use std::cell::RefCell;

use crate::tensor::Real;

/// Activation-pattern tape for finite-difference checks. While recording,
/// every ReLU stores which inputs were positive; while replaying, ReLUs
/// apply the stored pattern instead of their own, so nudged forward passes
/// stay on the smooth branch the backward pass differentiates.
enum Tape {
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

thread_local! {
    static TAPE: RefCell<Option<Tape>> = const { RefCell::new(None) };
}

pub(crate) fn tape_record() {
    TAPE.with(|t| *t.borrow_mut() = Some(Tape::Record(Vec::new())));
}

/// Switches a recording to replay; subsequent forward passes reuse it from
/// the first ReLU onwards.
pub(crate) fn tape_rewind() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        *t = match t.take() {
            Some(Tape::Record(m)) | Some(Tape::Replay(m, _)) => Some(Tape::Replay(m, 0)),
            None => None,
        };
    });
}

pub(crate) fn tape_clear() {
    TAPE.with(|t| *t.borrow_mut() = None);
}

pub fn relu_inplace<T: Real>(v: &mut [T]) {
    let taped = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        match t.as_mut() {
            None => false,
            Some(Tape::Record(masks)) => {
                masks.push(v.iter().map(|&x| x > T::zero()).collect());
                false
            }
            Some(Tape::Replay(masks, cursor)) => {
                let mask = &masks[*cursor];
                assert_eq!(mask.len(), v.len(), "relu tape out of sync");
                for (x, &keep) in v.iter_mut().zip(mask) {
                    if !keep {
                        *x = T::zero();
                    }
                }
                *cursor = (*cursor + 1) % masks.len();
                true
            }
        }
    });
    if !taped {
        v.iter_mut().for_each(|x| *x = x.max(T::zero()));
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(output: &[T], grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Exact GELU: `x * Phi(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d/dx [x * Phi(x)] = Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Real;

/// Whether the optimizer updates a tensor or it is carried state
/// (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// A named tensor owned by a layer. Gradients are allocated lazily on the
/// first backward pass so inference-only models carry no gradient storage.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>, kind: ParamKind) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape");
        Self {
            value,
            shape: shape.to_vec(),
            kind,
            grad: Vec::new(),
        }
    }

    pub fn filled(shape: &[usize], v: T, kind: ParamKind) -> Self {
        Self::new(shape, vec![v; shape.iter().product()], kind)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    /// Accumulated gradient; empty until the first backward.
    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        }
        &mut self.grad
    }

    /// Value and (allocated) gradient borrowed together.
    pub fn value_and_grad(&mut self) -> (&[T], &mut [T]) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        }
        (&self.value, &mut self.grad)
    }

    /// Mutable value next to the gradient as it stands (possibly empty),
    /// for optimizer updates.
    pub fn value_mut_and_grad(&mut self) -> (&mut [T], &[T]) {
        (&mut self.value, &self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Hierarchical enumeration of every tensor a layer owns.
///
/// Names are dotted paths (`encoder.stages.0.blocks.1.attn.q.weight`); they
/// are the keys of the checkpoint format.
pub trait Visit<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Visit<T> for Param<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Real, M: Visit<T>> Visit<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real, M: Visit<T>> Visit<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Visit`] by delegating to the listed fields, named after them.
macro_rules! visit_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Real> $crate::blocks::Visit<T> for $ty<T> {
            fn visit(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &$crate::blocks::Param<T>),
            ) {
                $( $crate::blocks::Visit::visit(
                    &self.$field,
                    &$crate::blocks::param::join(prefix, stringify!($field)),
                    f,
                ); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::blocks::Param<T>),
            ) {
                $( $crate::blocks::Visit::visit_mut(
                    &mut self.$field,
                    &$crate::blocks::param::join(prefix, stringify!($field)),
                    f,
                ); )*
            }
        }
    };
}
pub(crate) use visit_fields;

/// Number of trainable scalars (running statistics excluded).
pub fn trainable_count<T: Real>(m: &impl Visit<T>) -> usize {
    let mut total = 0;
    m.visit("", &mut |_, p| {
        if p.is_trainable() {
            total += p.len();
        }
    });
    total
}

pub fn zero_grads<T: Real>(m: &mut impl Visit<T>) {
    m.visit_mut("", &mut |_, p| p.zero_grad());
}

/// Seeded weight initializer. Construction order defines the draw order, so
/// a given config and seed always produce identical weights.
pub struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub const DEFAULT_STD: f64 = 0.02;

    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: Self::DEFAULT_STD,
        }
    }

    /// Normal(0, std) truncated to `[-2 std, 2 std]` by rejection.
    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize]) -> Param<T> {
        let n: usize = shape.iter().product();
        let mut v = Vec::with_capacity(n);
        while v.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                v.push(T::lit(z * self.std));
            }
        }
        Param::new(shape, v, ParamKind::Trainable)
    }

    pub fn zeros<T: Real>(&mut self, shape: &[usize]) -> Param<T> {
        Param::filled(shape, T::zero(), ParamKind::Trainable)
    }

    pub fn ones<T: Real>(&mut self, shape: &[usize]) -> Param<T> {
        Param::filled(shape, T::one(), ParamKind::Trainable)
    }
}

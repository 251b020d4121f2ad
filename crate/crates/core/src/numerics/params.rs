use super::Matrix;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamSlot {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamSlot { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that owns named parameter slots.
///
/// Visit order must be stable: optimizers and checkpoints index slots by it.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ParamSlot));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamSlot));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    fn slot_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }
}

/// A bare list of slots, handy for tests and small objectives.
#[derive(Clone, Debug, Default)]
pub struct SlotList(pub Vec<(String, ParamSlot)>);

impl Parameters for SlotList {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ParamSlot)) {
        for (n, p) in &self.0 {
            f(n, p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamSlot)) {
        for (n, p) in &mut self.0 {
            f(n, p);
        }
    }
}

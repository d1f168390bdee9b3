//! LeNet task network: feature extractor `F` producing 84-d embeddings and a linear
//! classifier head `H`.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{L2dError, Result};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const EMBED_DIM: usize = 84;

/// Uniform draw in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Anything holding an ordered list of named trainable tensors.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(&'static str, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter as a tape leaf, in `named_params` order.
    fn bind_all(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect()
    }

    fn write_to(&self, prefix: &str, ckpt: &mut Checkpoint) -> Result<()> {
        for (name, t) in self.named_params() {
            ckpt.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    fn read_from(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<&'static str> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.into_iter().zip(self.params_mut()) {
            let key = format!("{prefix}.{name}");
            let stored = ckpt.require(&key)?;
            if stored.shape() != slot.shape() {
                return Err(L2dError::shape(
                    "checkpoint",
                    format!("{key}: stored {:?}, model expects {:?}", stored.shape(), slot.shape()),
                ));
            }
            *slot = stored.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub num_classes: usize,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

impl TaskModel {
    pub fn new(num_classes: usize, rng: &mut StreamRng) -> Self {
        let c = IMAGE_CHANNELS;
        TaskModel {
            num_classes,
            conv1_w: uniform_init(&[6, c, 5, 5], c * 25, rng),
            conv1_b: uniform_init(&[6], c * 25, rng),
            conv2_w: uniform_init(&[16, 6, 5, 5], 6 * 25, rng),
            conv2_b: uniform_init(&[16], 6 * 25, rng),
            fc1_w: uniform_init(&[120, 400], 400, rng),
            fc1_b: uniform_init(&[120], 400, rng),
            fc2_w: uniform_init(&[EMBED_DIM, 120], 120, rng),
            fc2_b: uniform_init(&[EMBED_DIM], 120, rng),
            head_w: uniform_init(&[num_classes, EMBED_DIM], EMBED_DIM, rng),
            head_b: uniform_init(&[num_classes], EMBED_DIM, rng),
        }
    }

    /// Zero the classifier head, making every prediction uniform.
    pub fn zero_head(&mut self) {
        self.head_w.data_mut().fill(0.0);
        self.head_b.data_mut().fill(0.0);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TaskModelVars {
        let v = self.bind_all(tape, trainable);
        TaskModelVars {
            conv1_w: v[0],
            conv1_b: v[1],
            conv2_w: v[2],
            conv2_b: v[3],
            fc1_w: v[4],
            fc1_b: v[5],
            fc2_w: v[6],
            fc2_b: v[7],
            head_w: v[8],
            head_b: v[9],
        }
    }

    /// Class logits for a batch, computed without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let z = vars.embed(&mut tape, x)?;
        let out = vars.classify(&mut tape, z)?;
        Ok(tape.value(out).clone())
    }

    /// Argmax predictions, evaluated in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut preds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let logits = self.logits(&images.slice_rows(start, end)?)?;
            preds.extend(logits.data().chunks(self.num_classes).map(argmax));
            start = end;
        }
        Ok(preds)
    }
}

impl Parameterized for TaskModel {
    fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("fc1.weight", &self.fc1_w),
            ("fc1.bias", &self.fc1_b),
            ("fc2.weight", &self.fc2_w),
            ("fc2.bias", &self.fc2_b),
            ("head.weight", &self.head_w),
            ("head.bias", &self.head_b),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }
}

/// A [`TaskModel`] whose parameters are recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TaskModelVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl TaskModelVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
            self.head_w,
            self.head_b,
        ]
    }

    /// `F`: `[B, 3, 32, 32] -> [B, 84]`.
    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(L2dError::shape("embed", format!("expected [B, 3, 32, 32], got {shape:?}")));
        }
        let h = conv_bias(tape, x, self.conv1_w, self.conv1_b)?;
        let h = tape.tanh(h);
        let h = tape.max_pool2(h)?;
        let h = conv_bias(tape, h, self.conv2_w, self.conv2_b)?;
        let h = tape.tanh(h);
        let h = tape.max_pool2(h)?;
        let b = tape.shape(h)[0];
        let h = tape.reshape(h, &[b, 400])?;
        let h = tape.linear(h, self.fc1_w, self.fc1_b)?;
        let h = tape.tanh(h);
        tape.linear(h, self.fc2_w, self.fc2_b)
    }

    /// `H`: embeddings to unnormalized class scores.
    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        tape.linear(z, self.head_w, self.head_b)
    }
}

fn conv_bias(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.conv2d(x, w, 1, 0)?;
    let cout = tape.shape(b)[0];
    let b4 = tape.reshape(b, &[1, cout, 1, 1])?;
    let shape = tape.shape(y).to_vec();
    let bb = tape.broadcast_to(b4, &shape)?;
    tape.add(y, bb)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Fraction of predictions equal to their label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

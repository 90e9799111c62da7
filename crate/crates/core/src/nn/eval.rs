use super::ops::{bn_affine, bn_sample, conv_sample, relu_in_place};
use super::{ActShape, Activation, LayerNode, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Row-major `n x classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub n: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-call precomputation shared by every sample.
struct Prepared<'g> {
    graph: &'g ModelGraph,
    shapes: Vec<ActShape>,
    bn: Vec<Option<Vec<(f32, f32)>>>,
}

impl<'g> Prepared<'g> {
    fn new(graph: &'g ModelGraph) -> Result<Self> {
        let shapes = graph.shapes()?;
        let bn = graph.layers().iter().map(|l| l.node.bn().map(bn_affine)).collect();
        Ok(Self { graph, shapes, bn })
    }

    fn check_batch(&self, batch: &Tensor4) -> Result<()> {
        let input = self.graph.input();
        let [_, c, h, w] = batch.dims();
        if (c, h, w) != (input.c, input.h, input.w) {
            return Err(Error::Shape(format!(
                "batch samples are {c}x{h}x{w}, model expects {}x{}x{}",
                input.c, input.h, input.w
            )));
        }
        Ok(())
    }

    /// Runs one sample; with `stop_at = Some(i)` returns the pre-normalization
    /// output of weighted layer `i` instead of the logits.
    fn run(&self, x: &[f32], stop_at: Option<usize>) -> Vec<f32> {
        let input = self.graph.input();
        let (mut h, mut w) = (input.h, input.w);
        let mut cur = x.to_vec();
        let mut shortcuts: Vec<Vec<f32>> = Vec::new();
        for (i, layer) in self.graph.layers().iter().enumerate() {
            match &layer.node {
                LayerNode::Conv(conv) => {
                    let ActShape::Map { h: oh, w: ow, .. } = self.shapes[i] else {
                        unreachable!("validated graph")
                    };
                    let mut z = conv_sample(&cur, h, w, &conv.weights, oh, ow);
                    if stop_at == Some(i) {
                        return z;
                    }
                    if let Some(affine) = &self.bn[i] {
                        bn_sample(&mut z, oh * ow, affine);
                    }
                    if conv.activation == Activation::Relu {
                        relu_in_place(&mut z);
                    }
                    cur = z;
                }
                LayerNode::Linear(lin) => {
                    let wts = &lin.weights;
                    let mut z: Vec<f32> = (0..wts.out_features())
                        .map(|o| {
                            let row = &wts.data()[o * wts.in_features()..(o + 1) * wts.in_features()];
                            row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f32>()
                        })
                        .collect();
                    if let Some(bias) = wts.bias() {
                        for (v, b) in z.iter_mut().zip(bias) {
                            *v += b;
                        }
                    }
                    if stop_at == Some(i) {
                        return z;
                    }
                    if lin.activation == Activation::Relu {
                        relu_in_place(&mut z);
                    }
                    cur = z;
                }
                LayerNode::GlobalAvgPool => {
                    let plane = h * w;
                    cur = cur
                        .chunks_exact(plane)
                        .map(|ch| ch.iter().sum::<f32>() / plane as f32)
                        .collect();
                }
                LayerNode::Flatten => {}
                LayerNode::ResidualBegin => shortcuts.push(cur.clone()),
                LayerNode::ResidualEnd => {
                    let shortcut = shortcuts.pop().expect("validated graph");
                    for (v, s) in cur.iter_mut().zip(&shortcut) {
                        *v += s;
                    }
                }
            }
            if let ActShape::Map { h: nh, w: nw, .. } = self.shapes[i] {
                h = nh;
                w = nw;
            }
        }
        cur
    }
}

/// Logits for a batch. Samples are processed independently, so results do not
/// depend on how a caller partitions the batch.
pub fn forward(graph: &ModelGraph, batch: &Tensor4) -> Result<Logits> {
    let prep = Prepared::new(graph)?;
    prep.check_batch(batch)?;
    let classes = graph.num_classes();
    let mut data = Vec::with_capacity(batch.n() * classes);
    for i in 0..batch.n() {
        data.extend(prep.run(batch.sample(i), None));
    }
    Ok(Logits {
        n: batch.n(),
        classes,
        data,
    })
}

pub fn forward_sample(graph: &ModelGraph, sample: &[f32]) -> Result<Vec<f32>> {
    let prep = Prepared::new(graph)?;
    let input = graph.input();
    if sample.len() != input.c * input.h * input.w {
        return Err(Error::Shape(format!(
            "sample has {} values, model expects {}",
            sample.len(),
            input.c * input.h * input.w
        )));
    }
    Ok(prep.run(sample, None))
}

/// Pre-normalization output `Z` of weighted layer `layer` for every sample,
/// as `(n, channels, h, w)` (linear layers report `h = w = 1`).
pub fn pre_activation(graph: &ModelGraph, batch: &Tensor4, layer: usize) -> Result<Tensor4> {
    let prep = Prepared::new(graph)?;
    prep.check_batch(batch)?;
    let dims = match (graph.layer(layer).map(|l| &l.node), prep.shapes.get(layer)) {
        (Some(LayerNode::Conv(_)), Some(&ActShape::Map { c, h, w })) => [c, h, w],
        (Some(LayerNode::Linear(_)), Some(&ActShape::Flat { features, .. })) => [features, 1, 1],
        _ => return Err(Error::InvalidGraph(format!("layer {layer} is not a weighted layer"))),
    };
    let mut data = Vec::with_capacity(batch.n() * dims.iter().product::<usize>());
    for i in 0..batch.n() {
        data.extend(prep.run(batch.sample(i), Some(layer)));
    }
    Tensor4::new([batch.n(), dims[0], dims[1], dims[2]], data)
}

fn count_correct(prep: &Prepared, images: &Tensor4, labels: &[usize], range: std::ops::Range<usize>) -> usize {
    range
        .filter(|&i| argmax(&prep.run(images.sample(i), None)) == labels[i])
        .count()
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn accuracy(graph: &ModelGraph, images: &Tensor4, labels: &[usize]) -> Result<f64> {
    accuracy_with_workers(graph, images, labels, 1)
}

/// [`accuracy`] with the batch split into `workers` contiguous partitions.
/// The result is identical for every worker count.
pub fn accuracy_with_workers(graph: &ModelGraph, images: &Tensor4, labels: &[usize], workers: usize) -> Result<f64> {
    if labels.len() != images.n() {
        return Err(Error::Shape(format!(
            "{} labels for {} images",
            labels.len(),
            images.n()
        )));
    }
    if images.n() == 0 {
        return Err(Error::Shape("accuracy over an empty batch".into()));
    }
    let prep = Prepared::new(graph)?;
    prep.check_batch(images)?;
    let n = images.n();
    let workers = workers.clamp(1, n);
    let correct = if workers == 1 {
        count_correct(&prep, images, labels, 0..n)
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|k| {
                    let prep = &prep;
                    let range = (k * chunk).min(n)..((k + 1) * chunk).min(n);
                    scope.spawn(move || count_correct(prep, images, labels, range))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).sum()
        })
    };
    Ok(correct as f64 / n as f64)
}

/// Index of the weighted layer consuming the output of `layer`, looking
/// through pooling and flatten nodes.
pub(crate) fn next_weighted(graph: &ModelGraph, layer: usize) -> Option<usize> {
    for (j, l) in graph.layers().iter().enumerate().skip(layer + 1) {
        match l.node {
            LayerNode::Conv(_) | LayerNode::Linear(_) => return Some(j),
            LayerNode::GlobalAvgPool | LayerNode::Flatten => continue,
            LayerNode::ResidualBegin | LayerNode::ResidualEnd => return None,
        }
    }
    None
}

/// Frobenius norm of the difference between the successor pre-activation maps
/// of `layer` in the two graphs.
pub fn feature_map_error(original: &ModelGraph, pruned: &ModelGraph, batch: &Tensor4, layer: usize) -> Result<f64> {
    let succ = next_weighted(original, layer)
        .ok_or_else(|| Error::InvalidGraph(format!("layer {layer} has no weighted successor")))?;
    let a = pre_activation(original, batch, succ)?;
    let b = pre_activation(pruned, batch, succ)?;
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "compared feature maps differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

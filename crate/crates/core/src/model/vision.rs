use super::{ModelConfig, ModelError, ParamNodes, Result};
use crate::synthgen::ImageSample;
use crate::tensor::{Graph, NodeId, Padding, Tensor};

/// Stacks images into a `[batch, 3, size, size]` tensor.
pub fn image_batch(cfg: &ModelConfig, images: &[&ImageSample]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(ModelError::Input("empty image batch".into()));
    }
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for img in images {
        if img.size != s || img.pixels.len() != 3 * s * s {
            return Err(ModelError::Input(format!(
                "image {} is {}x{}, model expects {s}x{s}",
                img.id, img.size, img.size
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 3, s, s], data)?)
}

/// Convolutional stack from `[batch, 3, size, size]` input to per-cell
/// embeddings `[batch, cells, D]`.
pub fn vision_branch(g: &mut Graph, pn: &ParamNodes, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let b = g.shape(x)[0];
    let c1 = g.conv2d(x, pn.node("vision.conv1.w"), 2, Padding::Same)?;
    let c1 = g.add(c1, pn.node("vision.conv1.b"))?;
    let c1 = g.relu(c1);
    let c2 = g.conv2d(c1, pn.node("vision.conv2.w"), 2, Padding::Same)?;
    let c2 = g.add(c2, pn.node("vision.conv2.b"))?;
    let c2 = g.relu(c2);
    let pooled = g.maxpool2d(c2, 2, 2)?;
    let c3 = g.conv2d(pooled, pn.node("vision.conv3.w"), 1, Padding::Valid)?;
    let c3 = g.add(c3, pn.node("vision.conv3.b"))?;
    let n = cfg.n_cells();
    let flat = g.reshape(c3, &[b, cfg.embed_dim, n])?;
    Ok(g.transpose(flat, &[0, 2, 1])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_images, ModelParams};
    use crate::parallel::Execution;
    use crate::tensor::{grad_check, Bindings};

    fn image(cfg: &ModelConfig, fill: impl Fn(usize) -> f64) -> ImageSample {
        let s = cfg.image_size;
        ImageSample {
            id: "x".into(),
            class: "c".into(),
            pixels: (0..3 * s * s).map(fill).collect(),
            size: s,
            source_bucket: 0,
            is_isolated: true,
        }
    }

    #[test]
    fn default_config_gives_64_cells() {
        let cfg = ModelConfig::default();
        let p = ModelParams::random(cfg, 1).unwrap();
        let img = image(&cfg, |i| ((i % 7) as f64 - 3.0) / 3.0);
        let cells = embed_images(&p, &[&img], Execution::Sequential).unwrap();
        assert_eq!(cells[0].len(), 64);
        assert_eq!(cells[0][0].len(), 32);
    }

    #[test]
    fn zero_image_and_zero_biases_give_zero_cells() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::random(cfg, 1).unwrap();
        for name in ["vision.conv1.b", "vision.conv2.b", "vision.conv3.b"] {
            let t = p.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = image(&cfg, |_| 0.0);
        let cells = embed_images(&p, &[&img], Execution::Sequential).unwrap();
        assert!(cells[0].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn vision_grad_check() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::random(cfg, 3).unwrap();
        let img = image(&cfg, |i| ((i * 37 % 11) as f64 - 5.0) / 4.0);
        let input = image_batch(&cfg, &[&img]).unwrap();
        let mut g = Graph::new();
        let pn = ParamNodes::declare(&mut g, &p).unwrap();
        let x = g.input(input.shape()).unwrap();
        let cells = vision_branch(&mut g, &pn, &cfg, x).unwrap();
        let root = g.sum(cells);
        let mut b = Bindings::new();
        pn.bind(&mut b, &p);
        b.bind(x, &input);
        let wrt: Vec<NodeId> = p.indices_with_prefix("vision.").iter().map(|&i| pn.ids[i]).collect();
        assert!(grad_check(&g, root, &b, &wrt, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let cfg = ModelConfig::tiny();
        let mut img = image(&cfg, |_| 0.0);
        img.size = 4;
        assert!(image_batch(&cfg, &[&img]).is_err());
    }
}

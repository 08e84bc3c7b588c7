use super::*;
use crate::autograd::{Graph, ParamGroup, Tensor};
use crate::corpus::{Concept, ImageSample};
use crate::testutil::{rand_tensor, rng};

fn small(bridge: bool) -> EncoderConfig {
    EncoderConfig {
        channels: 6,
        dim: 8,
        vocab_size: 128,
        bridge_enabled: bridge,
        ..Default::default()
    }
}

fn noise_image(seed: u64, h: usize, w: usize) -> ImageSample {
    let mut r = rng(seed);
    let t = rand_tensor(&mut r, &[h * w * 3], 1.0);
    let px = t.data().iter().map(|v| (0.5 + 0.5 * v).clamp(0.0, 1.0) as f32).collect();
    ImageSample::new("n", h, w, px).unwrap()
}

#[test]
fn anchor_count_and_shapes() {
    let m = Model::new(small(true), 1).unwrap();
    let b = m.encode_image(&noise_image(0, 32, 32)).unwrap();
    assert_eq!(b.len(), 20);
    assert_eq!(b.features[0].len(), 8);
    assert_eq!(b.level_of.iter().filter(|l| **l == 1).count(), 4);
    for f in &b.features {
        let n: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    for s in b.centerness.iter().chain(&b.iou_pred).chain(&b.cls_pred) {
        assert!(*s > 0.0 && *s < 1.0);
    }
}

#[test]
fn zero_params_give_identical_rows_and_runs_are_deterministic() {
    let z = Model::zeros(small(true)).unwrap();
    let b = z.encode_image(&noise_image(1, 32, 32)).unwrap();
    assert!(b.features.iter().all(|f| f == &b.features[0]));
    let m = Model::new(small(true), 5).unwrap();
    let img = noise_image(2, 32, 64);
    assert_eq!(m.encode_image(&img).unwrap(), m.encode_image(&img).unwrap());
}

#[test]
fn indivisible_image_is_rejected() {
    let m = Model::new(small(false), 1).unwrap();
    assert!(m.encode_image(&noise_image(0, 24, 32)).is_err());
}

/// Direct 3×3 convolution with zero padding, output `co × h·w`.
fn conv3x3_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at2(o, (ci * 3 + ky) * 3 + kx)
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn bridge_with_zero_offsets_and_unit_mask_is_plain_conv() {
    let mut m = Model::new(small(true), 4).unwrap();
    for name in ["bridge.offset.w", "bridge.offset.b", "bridge.mask.w"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let id = m.params().id("bridge.mask.b").unwrap();
    m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 60.0);
    let mut r = rng(9);
    let feats = rand_tensor(&mut r, &[6, 5, 7], 1.0);
    let reg = rand_tensor(&mut r, &[6, 5, 7], 1.0);
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let rg = g.constant(reg);
    let cols = m.deformable_bridge(&mut g, f, rg).unwrap();
    let w = g.constant(rand_tensor(&mut r, &[3, 54], 1.0));
    let out = g.matmul(w, cols);
    let oracle = conv3x3_oracle(&feats, g.value(w), &Tensor::zeros(&[3]));
    for (a, b) in g.value(out).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
    let bad = g.constant(Tensor::zeros(&[6, 4, 7]));
    assert!(m.deformable_bridge(&mut g, f, bad).is_err());
}

fn regression_grad_norm(bridge: bool) -> f64 {
    let m = Model::new(small(bridge), 7).unwrap();
    let mut g = Graph::new();
    let v = m.forward_image(&mut g, &noise_image(3, 32, 32)).unwrap();
    let mut r = rng(11);
    let probe = g.constant(rand_tensor(&mut r, &[20, 8], 1.0));
    let prod = g.mul(v.features, probe);
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    grads
        .params()
        .filter(|(id, _)| m.params().group(*id) == ParamGroup::Regression)
        .map(|(_, t)| t.map_or(0.0, |t| t.sq_norm()))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn bridge_routes_classification_gradient_to_regression_branch() {
    assert!(regression_grad_norm(true) > 1e-8);
    assert_eq!(regression_grad_norm(false), 0.0);
}

#[test]
fn text_embeddings() {
    let m = Model::new(small(true), 2).unwrap();
    let long = (0..20).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    let c = vec![Concept::plain("red cube"), Concept::plain("red cube"), Concept::plain(long)];
    let e = m.encode_texts(&c).unwrap();
    assert_eq!(e.token_counts, vec![2, 2, 16]);
    assert_eq!(e.embeddings[0], e.embeddings[1]);
    for row in &e.embeddings {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert!(m.encode_texts(&[]).is_err());
    let empty = m.encode_text_strs(&["..."]).unwrap();
    assert_eq!(empty.token_counts, vec![0]);
}

#[test]
fn decode_boxes_contract() {
    let m = Model::new(small(true), 2).unwrap();
    let mut b = m.encode_image(&noise_image(0, 32, 32)).unwrap();
    b.reg_deltas.iter_mut().for_each(|d| *d = [0.0; 4]);
    let dec = decode_boxes(&b);
    // Interior anchor at level 0, location (1,1): center (12,12), side 16.
    assert_eq!(dec[5], [4.0, 4.0, 20.0, 20.0]);
    // Anchor of side 16 at stride 8: a center delta of 0.5 moves the center by 8.
    b.reg_deltas[5] = [0.5, 0.0, 0.0, 0.0];
    assert_eq!(decode_boxes(&b)[5], [12.0, 4.0, 28.0, 20.0]);
    b.reg_deltas[5] = [10.0, -10.0, 3.0, 3.0];
    let out = decode_boxes(&b)[5];
    assert!(out[0] >= 0.0 && out[2] <= 32.0 && out[0] < out[2]);
    assert!(out[1] >= 0.0 && out[3] <= 32.0 && out[1] < out[3]);
}

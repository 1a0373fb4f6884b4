#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use w2w_core::adapter::{AdapterBundle, LoraLayer};
use w2w_oracle::{Mat, SplitMix};

pub fn to_array(m: &Mat) -> Array2<f64> {
    Array2::from_shape_fn((m.len(), m[0].len()), |(i, j)| m[i][j])
}

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn to_mat_f32(a: &Array2<f32>) -> Mat {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

fn f32_matrix(rng: &mut SplitMix, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.normal() as f32)
}

/// Random adapter with `layers` layers of shape d × k and rank `r`.
pub fn random_adapter(
    id: &str,
    rng: &mut SplitMix,
    shapes: &[(&str, usize, usize)],
    r: usize,
    alpha: f32,
) -> AdapterBundle {
    let layers: BTreeMap<String, LoraLayer> = shapes
        .iter()
        .map(|&(name, d, k)| {
            (
                name.to_string(),
                LoraLayer::new(f32_matrix(rng, r, k), f32_matrix(rng, d, r)),
            )
        })
        .collect();
    let mut b = AdapterBundle::from_layers(id, layers, alpha, "sd-test").unwrap();
    b.metadata.insert("alpha".into(), alpha.to_string());
    b.metadata.insert("base_model".into(), "sd-test".into());
    b.metadata.insert("adapter_id".into(), id.into());
    b
}

pub const SHAPES: &[(&str, usize, usize)] = &[
    ("unet.down.0.attn.to_v", 12, 10),
    ("unet.mid.ff", 16, 8),
    ("unet.up.1.attn.to_q", 6, 14),
    ("text.enc.0.attn.to_v", 9, 9),
];

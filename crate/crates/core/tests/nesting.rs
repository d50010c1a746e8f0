//! Sliced sub-networks against a naive ViT on copied weights.

mod common;

use common::{copy_subnet, ratio, reference_forward, store_weights, tiny, toy};
use slimvit::model::{export_subnet, infer, init_params, ModelConfig, ParamStore, Subnet};
use slimvit::slicing::SliceMode;
use slimvit::tensor::Tensor;

fn images(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(vec![b, cfg.in_channels, cfg.image_size, cfg.image_size], |_| {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x % 10_000) as f64 / 10_000.0
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_against_reference(cfg: &ModelConfig, store: &ParamStore<f64>, subnet: Subnet, imgs: &Tensor<f64>) -> f64 {
    let out = infer(store, cfg, imgs, subnet).unwrap();
    let weights = copy_subnet(store, subnet.ratio, subnet.mode);
    let k = cfg.num_classes;
    let per = imgs.numel() / imgs.shape()[0];
    let mut worst: f64 = 0.0;
    for i in 0..imgs.shape()[0] {
        let (cls, dist) = reference_forward(&weights, cfg, &imgs.data()[i * per..(i + 1) * per]);
        worst = worst.max(max_diff(&cls, &out.cls.data()[i * k..(i + 1) * k]));
        worst = worst.max(max_diff(&dist, &out.dist.data()[i * k..(i + 1) * k]));
    }
    worst
}

#[test]
fn sliced_forward_matches_naive_reference() {
    let cfg = toy("1/4,1,1/4");
    let store = init_params::<f64>(&cfg, 11).unwrap();
    let imgs = images(&cfg, 3, 1);
    for r in ["1/4", "1/2", "3/4", "1"] {
        for mode in [SliceMode::Leading, SliceMode::Trailing] {
            let d = check_against_reference(&cfg, &store, Subnet { ratio: ratio(r), mode }, &imgs);
            assert!(d <= 1e-9, "r={r} {mode:?}: {d}");
        }
    }
}

#[test]
fn full_width_reference_agrees_with_store_weights() {
    let cfg = tiny("1/4,1,1/4");
    let store = init_params::<f64>(&cfg, 2).unwrap();
    let imgs = images(&cfg, 2, 5);
    let out = infer(&store, &cfg, &imgs, Subnet::full()).unwrap();
    let per = imgs.numel() / 2;
    let (cls, _) = reference_forward(&store_weights(&store), &cfg, &imgs.data()[per..]);
    assert!(max_diff(&cls, &out.cls.data()[cfg.num_classes..]) <= 1e-12);
}

#[test]
fn exported_subnets_reproduce_in_place_logits() {
    let cfg = toy("1/4,1,1/4");
    let store = init_params::<f64>(&cfg, 4).unwrap();
    let imgs = images(&cfg, 4, 9);
    for r in ["1/4", "1/2", "3/4", "1"] {
        let subnet = cfg.subnet(ratio(r)).unwrap();
        let (sub_cfg, sub_store) = export_subnet(&store, &cfg, subnet.ratio, subnet.mode).unwrap();
        assert_eq!(sub_cfg.embed_dim, ratio(r).of(64).unwrap());
        assert_eq!(sub_store.num_params(), store.sliced_params(subnet).unwrap());
        let a = infer(&store, &cfg, &imgs, subnet).unwrap();
        let b = infer(&sub_store, &sub_cfg, &imgs, Subnet::full()).unwrap();
        assert!(max_diff(a.cls.data(), b.cls.data()) <= 1e-12, "r={r}");
        assert!(max_diff(a.dist.data(), b.dist.data()) <= 1e-12, "r={r}");
    }
}

#[test]
fn smaller_leading_subnets_only_read_nested_weights() {
    // Perturbing weights outside the 1/2 leading block leaves its logits
    // untouched but changes the full model.
    let cfg = tiny("1/4,1,1/4");
    let mut store = init_params::<f64>(&cfg, 8).unwrap();
    let imgs = images(&cfg, 2, 3);
    let half = Subnet { ratio: ratio("1/2"), mode: SliceMode::Leading };
    let before = infer(&store, &cfg, &imgs, half).unwrap();
    let full_before = infer(&store, &cfg, &imgs, Subnet::full()).unwrap();
    let p = store.get_mut("blocks.0.attn.q.weight").unwrap();
    let cols = p.tensor.shape()[1];
    p.tensor.data_mut()[cols - 1] += 0.5; // row 0, last column
    let after = infer(&store, &cfg, &imgs, half).unwrap();
    let full_after = infer(&store, &cfg, &imgs, Subnet::full()).unwrap();
    assert_eq!(before.cls.data(), after.cls.data());
    assert!(max_diff(full_before.cls.data(), full_after.cls.data()) > 0.0);
}

use manet::adapters::install_adapters;
use manet::autograd::Graph;
use manet::encoder::{count_parameters, lift_dsm, SamEncoder};
use manet::param::{Component, Initializer, Ledger, ParamStore};
use manet::tensor::Tensor;
use manet::{AdapterMode, EncoderConfig, Modality};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(cfg: &EncoderConfig, mode: AdapterMode, seed: u64) -> (SamEncoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sink = Initializer::new(&mut store, &mut rng);
    let mut enc = SamEncoder::new(&mut sink, cfg).unwrap();
    install_adapters(&mut enc, &mut sink, cfg.embed_dim / 4, true, mode, Modality::Both).unwrap();
    (enc, store)
}

fn image(seed: u64, channels: usize, size: usize) -> Tensor<f32> {
    Tensor::uniform([channels, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn patch_embed_grid_shapes() {
    let (enc, store) = build(&EncoderConfig::toy(), AdapterMode::None, 1);
    let mut g = Graph::new();
    let t = enc.patch_embed(&mut g, &store, &image(2, 3, 64)).unwrap();
    assert_eq!(g.shape(t), &[4, 4, 32]);

    let big = EncoderConfig { image_size: 1024, embed_dim: 8, heads: 2, depth: 0, ..EncoderConfig::toy() };
    let (enc, store) = build(&big, AdapterMode::None, 1);
    let mut g = Graph::new();
    let t = enc.patch_embed(&mut g, &store, &Tensor::zeros([3, 1024, 1024])).unwrap();
    assert_eq!(g.shape(t), &[64, 64, 8]);
}

#[test]
fn patch_embed_of_zero_image_is_bias() {
    let (enc, mut store) = build(&EncoderConfig::toy(), AdapterMode::None, 1);
    let pos = store.get_mut(enc.pos_embed);
    pos.tensor = Tensor::zeros(pos.tensor.shape().to_vec());
    let bias = store.get_mut(enc.patch.bias);
    bias.tensor = Tensor::from_fn([32], |i| i as f32 * 0.1);
    let bias = bias.tensor.clone();
    let mut g = Graph::new();
    let t = enc.patch_embed(&mut g, &store, &Tensor::zeros([3, 64, 64])).unwrap();
    for tok in g.value(t).data().chunks(32) {
        assert_eq!(tok, bias.data());
    }
}

#[test]
fn patch_embed_rejects_bad_input() {
    let (enc, store) = build(&EncoderConfig::toy(), AdapterMode::None, 1);
    let mut g = Graph::new();
    assert!(enc.patch_embed(&mut g, &store, &Tensor::zeros([2, 64, 64])).is_err());
    assert!(enc.patch_embed(&mut g, &store, &Tensor::zeros([3, 60, 64])).is_err());
}

#[test]
fn lift_dsm_replicates() {
    let d = Tensor::<f32>::full([1, 2, 2], 0.7);
    assert_eq!(lift_dsm(&d).unwrap(), Tensor::full([3, 2, 2], 0.7));
    assert_eq!(lift_dsm(&Tensor::<f32>::zeros([1, 3, 3])).unwrap(), Tensor::zeros([3, 3, 3]));
    let r = image(3, 1, 8);
    let l = lift_dsm(&r).unwrap();
    for c in 0..3 {
        assert_eq!(&l.data()[c * 64..(c + 1) * 64], r.data());
    }
    assert!(lift_dsm(&Tensor::<f32>::zeros([2, 3, 3])).is_err());
}

#[test]
fn identical_inputs_give_identical_branches_without_adapters() {
    let (enc, store) = build(&EncoderConfig::toy(), AdapterMode::None, 4);
    let dsm = image(5, 1, 64);
    let mut g = Graph::new();
    let (fx, fy) = enc.encode_pair(&mut g, &store, &lift_dsm(&dsm).unwrap(), &dsm).unwrap();
    assert_eq!(g.shape(fx), &[4, 4, 32]);
    assert_eq!(g.value(fx), g.value(fy));
}

#[test]
fn distinct_inputs_give_finite_distinct_features() {
    for mode in [AdapterMode::None, AdapterMode::Standard, AdapterMode::MmAdapter] {
        let (enc, store) = build(&EncoderConfig::toy(), mode, 6);
        let mut g = Graph::new();
        let (fx, fy) = enc.encode_pair(&mut g, &store, &image(7, 3, 64), &image(8, 1, 64)).unwrap();
        assert_eq!(g.shape(fy), &[4, 4, 32]);
        assert!(g.value(fx).all_finite() && g.value(fy).all_finite());
        assert_ne!(g.value(fx), g.value(fy));
    }
}

#[test]
fn encode_pair_rejects_extent_mismatch() {
    let (enc, store) = build(&EncoderConfig::toy(), AdapterMode::None, 1);
    let mut g = Graph::new();
    assert!(enc.encode_pair(&mut g, &store, &image(1, 3, 64), &image(1, 1, 32)).is_err());
}

#[test]
fn blocks_preserve_token_shape() {
    let (enc, store) = build(&EncoderConfig::toy(), AdapterMode::None, 1);
    let mut g = Graph::new();
    let mut x = enc.patch_embed(&mut g, &store, &image(9, 3, 64)).unwrap();
    for blk in &enc.blocks {
        x = blk.forward_frozen(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(x), &[4, 4, 32]);
    }
}

#[test]
fn branches_share_one_backbone() {
    let (enc, store) = build(&EncoderConfig::toy(), AdapterMode::MmAdapter, 1);
    let mut g = Graph::new();
    enc.encode_pair(&mut g, &store, &image(1, 3, 64), &image(2, 1, 64)).unwrap();
    // One graph leaf per parameter, however many branches read it.
    let backbone = store.names(|p| p.component == Component::Backbone);
    assert!(backbone.iter().all(|n| n.starts_with("encoder.") && !n.contains(".y.")));
    assert_eq!(g.param_leaves(), store.len());
}

#[test]
fn parameter_counts() {
    let zero = EncoderConfig { depth: 0, ..EncoderConfig::toy() };
    let (c, grid) = (zero.embed_dim, zero.grid());
    assert_eq!(count_parameters(&zero).unwrap(), 16 * 16 * 3 * c + c + grid * grid * c);

    let toy = EncoderConfig::toy();
    let mut ledger = Ledger::new();
    SamEncoder::new(&mut ledger, &toy).unwrap();
    let audited: usize = ledger.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    let c = toy.embed_dim;
    let per_block = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (4 * c * c + 4 * c) + (4 * c * c + c);
    let closed = 16 * 16 * 3 * c + c + 16 * c + toy.depth * per_block;
    assert_eq!(audited, closed);
    assert_eq!(count_parameters(&toy).unwrap(), closed);

    let vit_b = count_parameters(&EncoderConfig::vit_b()).unwrap() as f64;
    assert!((vit_b / 89.7e6 - 1.0).abs() < 0.05, "{vit_b}");
}

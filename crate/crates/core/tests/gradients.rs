mod common;

use common::gradcheck::{check, GradReport};
use common::oracle::Lcg;
use common::{build, randomize};
use pptformer::attention::{ChannelAttention, InterPpa, IntraPpa};
use pptformer::autograd::Graph;
use pptformer::backbone::{In2pptBlock, ModelConfig, PptbBlock};
use pptformer::fusion::{BiPpf, CpfpGate, Fuser, Ppfn};
use pptformer::Tensor;

const TOL: f64 = 1e-4;

fn assert_ok(what: &str, r: GradReport) {
    println!("{what}: max rel err {:.3e} over {} entries ({})", r.max_rel, r.checked, r.worst);
    assert!(r.checked > 0);
    assert!(r.max_rel < TOL, "{what}: {r:?}");
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut lcg = Lcg(seed);
    shapes.iter().map(|s| lcg.tensor_signed(s)).collect()
}

#[test]
fn channel_attention_inputs_and_alpha() {
    for (heads, normalize) in [(1, true), (1, false), (3, true)] {
        let c = 3;
        let ins = inputs(1, &[&[1, c, 2, 2], &[1, c, 2, 2], &[1, c, 2, 2], &[heads]]);
        let mut ins = ins;
        ins[3].data_mut().iter_mut().for_each(|a| *a = 0.6 + a.abs());
        let store = pptformer::params::ParamStore::new();
        let r = check(&store, &ins, |g, x| g.channel_attention(x[0], x[1], x[2], x[3], heads, normalize), |_| true);
        assert_ok(&format!("channel_attention heads={heads} normalize={normalize}"), r);
    }
}

#[test]
fn channel_attention_module() {
    let (m, mut store) = build(2, |pb| ChannelAttention::new(pb, 4, 2, true));
    randomize(&mut store, 3, 0.5);
    let ins = inputs(4, &[&[1, 4, 2, 2]]);
    assert_ok("attention module", check(&store, &ins, |g, x| m.forward(g, x[0]), |_| true));
}

#[test]
fn intra_ppa() {
    let (m, mut store) = build(5, |pb| IntraPpa::new(pb, 3, 3, 1, true));
    randomize(&mut store, 6, 0.5);
    let ins = inputs(7, &[&[1, 3, 2, 2], &[1, 3, 2, 2]]);
    assert_ok("intra_ppa", check(&store, &ins, |g, x| m.forward(g, x[0], x[1]), |_| true));
}

#[test]
fn bippf() {
    let (m, mut store) = build(8, |pb| BiPpf::new(pb, 3, 2));
    randomize(&mut store, 9, 0.5);
    let ins = inputs(10, &[&[1, 3, 2, 2], &[1, 2, 2, 2]]);
    assert_ok("bippf", check(&store, &ins, |g, x| m.forward(g, x[0], x[1]), |_| true));
}

#[test]
fn inter_ppa() {
    let (m, mut store) = build(11, |pb| {
        let fusion = Some(Fuser::BiPpf(BiPpf::new(&mut pb.child("fusion"), 3, 3)?));
        let attention = ChannelAttention::new(&mut pb.child("attn"), 3, 1, true)?;
        Ok(InterPpa { fusion, attention })
    });
    randomize(&mut store, 12, 0.5);
    let ins = inputs(13, &[&[1, 3, 2, 2], &[1, 3, 2, 2]]);
    assert_ok("inter_ppa", check(&store, &ins, |g, x| m.forward(g, x[0], Some(x[1])), |_| true));
}

#[test]
fn ppfn() {
    let (m, mut store) = build(14, |pb| {
        let fusion = Some(Fuser::BiPpf(BiPpf::new(&mut pb.child("fusion"), 9, 3)?));
        Ppfn::new(pb, 3, 3, fusion)
    });
    randomize(&mut store, 15, 0.5);
    let ins = inputs(16, &[&[1, 3, 2, 2], &[1, 3, 2, 2]]);
    assert_ok("ppfn", check(&store, &ins, |g, x| m.forward(g, x[0], Some(x[1])), |_| true));
}

#[test]
fn cpfp_gate() {
    let (gate, mut store) = build(17, |pb| CpfpGate::new(pb));
    store.by_name_mut("gamma").unwrap().data_mut()[0] = 0.7;
    let ins = inputs(18, &[&[1, 2, 2, 2]]);
    assert_ok("cpfp gate", check(&store, &ins, |g, x| gate.apply(g, x[0]), |_| true));
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        levels: 2,
        blocks_per_level: vec![1, 1],
        heads_per_level: vec![1, 2],
        ppfn_expansion: 3,
        refinement_blocks: 0,
        parser_stage_blocks: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn pptb_block_including_gates() {
    let cfg = tiny_config();
    let (m, mut store) = build(19, |pb| PptbBlock::new(pb, &cfg, 2, 1));
    randomize(&mut store, 20, 0.5);
    let ins = inputs(21, &[&[1, 2, 2, 2], &[1, 2, 2, 2]]);
    assert_ok("pptb", check(&store, &ins, |g, x| m.forward(g, x[0], Some(x[1])), |_| true));
}

#[test]
fn in2ppt_block() {
    let cfg = tiny_config();
    let (m, mut store) = build(22, |pb| In2pptBlock::new(pb, &cfg, 2, 1));
    randomize(&mut store, 23, 0.5);
    let ins = inputs(24, &[&[1, 2, 2, 2], &[1, 2, 2, 2]]);
    assert_ok("in2ppt", check(&store, &ins, |g, x| m.forward(g, x[0], Some(x[1])), |_| true));
}

#[test]
fn layer_norm_and_resampling() {
    let (norm, mut store) = build(25, |pb| pptformer::layers::ChannelNorm::new(pb, 3));
    randomize(&mut store, 26, 1.0);
    let ins = inputs(27, &[&[2, 3, 2, 4]]);
    assert_ok("layer norm", check(&store, &ins, |g, x| norm.forward(g, x[0]), |_| true));
    let empty = pptformer::params::ParamStore::new();
    assert_ok(
        "pixel shuffle pair",
        check(&empty, &ins, |g, x| {
            let u = g.pixel_unshuffle(x[0])?;
            let s = g.pixel_shuffle(u)?;
            g.mul(s, x[0])
        }, |_| true),
    );
}

#[test]
fn frequency_loss() {
    let target = Lcg(28).tensor(&[1, 2, 4, 4]);
    let ins = inputs(29, &[&[1, 2, 4, 4]]);
    let empty = pptformer::params::ParamStore::new();
    assert_ok("freq loss", check(&empty, &ins, |g, x| g.freq_l1_loss(x[0], &target, 0.1), |_| true));
}

#[test]
fn graph_without_params_rejects_backward_in_inference() {
    let store = pptformer::params::ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let m = g.mean(x);
    assert!(g.backward(m).is_err());
}

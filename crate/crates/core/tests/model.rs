use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfir_reverb::autodiff::{AdamState, Graph, ParamGroup, Tensor};
use sfir_reverb::dsp::{make_context, FrameStack};
use sfir_reverb::layers::{envelope_upsample, Ctx, SfirLayer};
use sfir_reverb::model::{ModelConfig, ReverbModel};
use sfir_reverb::train::loss_graph;

fn noise(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

fn random_stack(cfg: &ModelConfig, seed: u64) -> FrameStack<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Vec<f64>> = (0..cfg.window()).map(|_| noise(&mut rng, cfg.frame_size, 0.5)).collect();
    make_context(&frames, cfg.context, cfg.context, cfg.hop).unwrap()
}

fn model(seed: u64) -> ReverbModel<f64> {
    ReverbModel::new(ModelConfig::desk(), seed).unwrap()
}

#[test]
fn forward_matches_step_by_step_composition() {
    let m = model(21);
    let c = &m.config;
    let stack = random_stack(c, 8);

    let g = Graph::new();
    let trace = m.forward_trace(&m.infer_ctx(&g), &stack).unwrap();
    let produced = g.value(trace.output).data().to_vec();
    assert_eq!(produced.len(), c.frame_size);

    // the same wiring spelled out again on a fresh graph
    let h = Graph::new();
    let ctx = Ctx::infer(&h, &m.params);
    let net = &m.net;
    let rows = c.window();
    let n = c.steps();
    let mut x1 = Vec::new();
    let mut z = Vec::new();
    for j in 0..rows {
        let fe = net.frontend.forward(&ctx, h.constant(Tensor::from_vec(stack.row(j).to_vec()))).unwrap();
        x1.push(fe.x1);
        z.push(h.transpose(fe.z).unwrap());
    }
    let mut latent = h.concat(&z, 0).unwrap();
    for layer in &net.shared {
        latent = layer.forward(&ctx, latent, c.dropout).unwrap();
    }
    let env = net.saaf_env.forward(&ctx, net.branch_env.forward(&ctx, latent, c.dropout).unwrap()).unwrap();
    let fir = net.saaf_fir.forward(&ctx, net.branch_fir.forward(&ctx, latent, c.dropout).unwrap()).unwrap();
    let mut direct = Vec::new();
    let mut reverb = Vec::new();
    for j in 0..rows {
        let z1 = h.transpose(h.slice_rows(env, j * n, (j + 1) * n).unwrap()).unwrap();
        let z2 = h.transpose(h.slice_rows(fir, j * n, (j + 1) * n).unwrap()).unwrap();
        let (values, _, slots) = net.sfir.build(&ctx, z2).unwrap();
        let filters = SfirLayer::materialize(&h, values, slots, c.ts);
        assert!(filters.dense().data().iter().all(|v| v.abs() <= 1.0));

        // causal FIR per band, truncated to the frame
        let bands = h.value(x1[j]);
        let dense = filters.dense();
        let taps = filters.filter_len();
        let mut wet = vec![0.0; c.bands * c.frame_size];
        for b in 0..c.bands {
            for t in 0..c.frame_size {
                let mut acc = 0.0;
                for k in 0..taps.min(t + 1) {
                    acc += dense.row(b)[k] * bands.row(b)[t - k];
                }
                wet[b * c.frame_size + t] = acc;
            }
        }
        let envelope = h.value(envelope_upsample(&h, z1, c.pool).unwrap());
        let x3: Vec<f64> = wet.iter().zip(envelope.data()).map(|(a, e)| a * e).collect();
        reverb.push(h.constant(Tensor::new(&[c.bands, c.frame_size], x3).unwrap()));
        direct.push(net.dnn.forward(&ctx, x1[j]).unwrap());
    }
    let k = c.context;
    let g2 = h.value(net.se_direct.forward(&ctx, &direct, k).unwrap());
    let g3 = h.value(net.se_reverb.forward(&ctx, &reverb, k).unwrap());
    assert_eq!(g2.data(), g.value(trace.g2).data());
    let x2 = h.value(direct[k]);
    let x3 = h.value(reverb[k]);
    for (a, b) in x3.data().iter().zip(g.value(trace.x3).data()) {
        assert!((a - b).abs() < 1e-12);
    }

    // mix and transposed convolution written out by hand
    let kernels = m.params.value(net.frontend.conv);
    let (_, taps) = kernels.dims2().unwrap();
    let pad = (taps - 1) / 2;
    let mut expected = vec![0.0; c.frame_size];
    for b in 0..c.bands {
        for t in 0..c.frame_size {
            let x0 = g2.data()[b] * x2.row(b)[t] + g3.data()[b] * x3.row(b)[t];
            for (q, w) in kernels.row(b).iter().enumerate() {
                if let Some(s) = (t + q).checked_sub(pad) {
                    if s < c.frame_size {
                        expected[s] += w * x0;
                    }
                }
            }
        }
    }
    let worst = expected.iter().zip(&produced).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max deviation {worst}");
}

#[test]
fn every_trainable_tensor_moves_after_one_step() {
    let mut m = model(3);
    let c = m.config.clone();
    let stack = random_stack(&c, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = noise(&mut rng, c.frame_size, 0.3);

    let grads = {
        let g = Graph::new();
        let ctx = Ctx::train(&g, &m.params, None);
        let out = m.forward(&ctx, &stack).unwrap();
        let loss = loss_graph(&g, g.constant(Tensor::from_vec(target)), out).unwrap().total;
        let penalty = g.scale(m.saaf_penalty(&ctx).unwrap(), 1e-3);
        g.backward(g.add(loss, penalty).unwrap()).unwrap()
    };
    m.params.accumulate(&grads, 1.0);

    let census = m.census();
    assert!(census.iter().all(|(name, _, _)| !name.contains("deconv")), "the deconvolution owns no tensor");
    let before = m.params.clone();
    for (id, p) in m.params.iter() {
        assert!(p.trainable, "{}", p.name);
        assert!(p.grad().iter().any(|v| *v != 0.0), "{} has zero gradient", p.name);
        assert!(p.grad().iter().all(|v| v.is_finite()), "{}", p.name);
        assert_eq!(id.index(), census.iter().position(|(n, _, _)| *n == p.name).unwrap());
    }
    AdamState::new(1e-3).step(&mut m.params, |_| true).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_ne!(a.value().data(), b.value().data(), "{} did not move", a.name);
    }
}

#[test]
fn deconvolution_reads_the_conv_kernels() {
    let mut m = model(5);
    let c = m.config.clone();
    let id = m.net.frontend.conv;
    assert_eq!(m.params.get(id).group, ParamGroup::Frontend);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = Tensor::new(&[c.bands, c.frame_size], noise(&mut rng, c.bands * c.frame_size, 1.0)).unwrap();

    let run = |m: &ReverbModel<f64>| {
        let g = Graph::new();
        let ctx = m.infer_ctx(&g);
        let out = m.net.frontend.deconv(&ctx, g.constant(y.clone())).unwrap();
        let direct = g.conv1d_transpose(g.constant(y.clone()), g.constant(m.params.value(id).clone())).unwrap();
        (g.value(out).data().to_vec(), g.value(direct).data().to_vec())
    };
    let (a, b) = run(&m);
    assert_eq!(a, b);

    // an optimizer step on the front-end changes both uses identically
    let stack = random_stack(&c, 6);
    let grads = {
        let g = Graph::new();
        let ctx = Ctx::train(&g, &m.params, None);
        let out = m.pretrain_forward(&ctx, stack.current()).unwrap();
        let loss = loss_graph(&g, g.constant(Tensor::from_vec(stack.current().to_vec())), out).unwrap().total;
        g.backward(loss).unwrap()
    };
    m.params.accumulate(&grads, 1.0);
    AdamState::new(1e-2).step(&mut m.params, |p| p.group == ParamGroup::Frontend).unwrap();
    let (a2, b2) = run(&m);
    assert_eq!(a2, b2);
    assert_ne!(a, a2);
}

#[test]
fn frame_boundaries_look_like_the_interior() {
    let m = model(11);
    let c = &m.config;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let hops = 24;
    let signal = noise(&mut rng, hops * c.hop, 0.5);
    let out = m.process_signal(&signal).unwrap();
    assert_eq!(out.len(), signal.len());

    let jumps: Vec<f64> = out.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let (mut edge, mut inner) = (Vec::new(), Vec::new());
    for (i, &j) in jumps.iter().enumerate() {
        // the jump from sample i to i+1 straddles a frame edge when i+1 is a hop multiple
        if (i + 1) % c.hop == 0 {
            edge.push(j);
        } else {
            inner.push(j);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (me, mi) = (mean(&edge), mean(&inner));
    let sd = (inner.iter().map(|v| (v - mi).powi(2)).sum::<f64>() / inner.len() as f64).sqrt();
    let stderr = sd / (edge.len() as f64).sqrt();
    assert!((me - mi).abs() < 4.0 * stderr, "edge mean {me}, interior mean {mi}, stderr {stderr}");

    let mut sorted = inner.clone();
    sorted.sort_by(f64::total_cmp);
    let p999 = sorted[(sorted.len() as f64 * 0.999) as usize];
    let worst_edge = edge.iter().copied().fold(0.0, f64::max);
    assert!(worst_edge <= p999, "edge jump {worst_edge} above interior 99.9th percentile {p999}");
}

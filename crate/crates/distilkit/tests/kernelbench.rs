// Scratch throughput probe; run explicitly with --ignored.
use std::time::Instant;

use distilkit::models::{Model, ModelConfig};
use distilkit::numerics::{mac_tally_read, mac_tally_reset, Rng, Tape};

#[test]
#[ignore]
fn kernel_throughput() {
    let cfg = ModelConfig::preset("toy-teacher").unwrap();
    let model: Model<f32> = Model::init(&cfg, &mut Rng::new(1)).unwrap();
    let wave: Vec<f32> = (0..12800).map(|i| (i as f32 * 0.05).sin() * 0.4).collect();

    model.forward_infer(&wave).unwrap();
    let t0 = Instant::now();
    let reps = 20;
    mac_tally_reset();
    for _ in 0..reps {
        model.forward_infer(&wave).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let macs = mac_tally_read() / reps;
    println!("infer: {:.2} ms, {} MMAC, {:.2} GMAC/s", dt * 1e3, macs / 1_000_000, macs as f64 / dt / 1e9);
    mac_tally_reset();

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let _ = model.forward_train(&mut tape, &wave, None).unwrap();
    }
    println!("taped fwd: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let fwd = model.forward_train(&mut tape, &wave, None).unwrap();
        let s = tape.sum(fwd.logits);
        tape.backward(s).unwrap();
    }
    println!("taped fwd+bwd: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

#[test]
#[ignore]
fn stage_breakdown() {
    use distilkit::numerics::Tensor;
    let cfg = ModelConfig::preset("toy-teacher").unwrap();
    let model: Model<f32> = Model::init(&cfg, &mut Rng::new(1)).unwrap();
    let wave: Vec<f32> = (0..12800).map(|i| (i as f32 * 0.05).sin() * 0.4).collect();
    let reps = 40;

    // conv stack only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut x = Tensor::new(vec![wave.len(), 1], wave.clone()).unwrap();
        for layer in &model.encoder {
            x = layer.infer(&x);
        }
    }
    println!("conv stack: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // frames for body
    let mut frames = Tensor::new(vec![wave.len(), 1], wave.clone()).unwrap();
    for layer in &model.encoder {
        frames = layer.infer(&frames);
    }
    let proj = model.frame_proj.as_ref().unwrap().infer(&frames);
    let pos = model.pos_conv.as_ref().unwrap().infer(&proj);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _p = model.frame_proj.as_ref().unwrap().infer(&frames);
    }
    println!("frame proj: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _p = model.pos_conv.as_ref().unwrap().infer(&proj);
    }
    println!("pos conv: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut x = pos.clone();
        for layer in &model.transformer_layers {
            x = layer.infer(&x, cfg.heads);
        }
    }
    println!("transformer x4: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _l = model.head.infer(&pos);
    }
    println!("head: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

#[test]
#[ignore]
fn activation_and_grad_stats() {
    use distilkit::losses::{ce_rows, Reduction};
    use distilkit::numerics::Tensor;
    let cfg = ModelConfig::preset("toy-teacher").unwrap();
    let mut mcfg = cfg.clone();
    mcfg.head = distilkit::models::HeadKind::Linear;
    let model: Model<f32> = Model::init(&mcfg, &mut Rng::new(7)).unwrap();
    let wave: Vec<f32> = (0..9600)
        .map(|i| (i as f32 * 2.0 * 3.14159 * 440.0 / 16000.0).sin() * 0.3)
        .collect();

    let stat = |name: &str, t: &Tensor<f32>| {
        let n = t.numel() as f32;
        let mean: f32 = t.data().iter().sum::<f32>() / n;
        let var: f32 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        println!("{name:<18} shape {:?} mean {mean:+.3e} std {:.3e}", t.shape(), var.sqrt());
    };

    let mut x = Tensor::new(vec![wave.len(), 1], wave.clone()).unwrap();
    for (i, layer) in model.encoder.iter().enumerate() {
        x = layer.infer(&x);
        stat(&format!("conv{i}"), &x);
    }
    let x = model.frame_proj.as_ref().unwrap().infer(&x);
    stat("proj", &x);
    let x2 = model.pos_conv.as_ref().unwrap().infer(&x);
    stat("pos", &x2);
    let mut y = x2.clone();
    for (i, layer) in model.transformer_layers.iter().enumerate() {
        y = layer.infer(&y, mcfg.heads);
        stat(&format!("layer{i}"), &y);
    }
    let yn = model.final_norm.as_ref().unwrap().infer(&y);
    stat("final_norm", &yn);
    let logits = model.head.infer(&yn);
    stat("logits", &logits);

    // gradient norms per named parameter after one masked-CE backward
    let mut tape = Tape::<f32>::new();
    let fwd = model.forward_train(&mut tape, &wave, None).unwrap();
    let frames = mcfg.frame_count(wave.len()).unwrap();
    let labels: Vec<usize> = (0..frames).map(|f| f % 32).collect();
    let loss = ce_rows(&mut tape, fwd.logits, &labels, None, Reduction::Mean).unwrap();
    tape.backward(loss).unwrap();
    let named = model.named_parameters();
    for (i, (name, _)) in named.iter().enumerate() {
        if let Some(g) = tape.grad(fwd.param_vars[i]) {
            let norm: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
            if i < 16 || name.contains("head") || name.contains("wq") {
                println!("grad {name:<28} l2 {norm:.3e}");
            }
        }
    }
}

#[test]
#[ignore]
fn overfit_miniature() {
    use distilkit::distillpipe::Adam;
    use distilkit::losses::{ce_rows, Reduction};
    let mut cfg = ModelConfig::preset("toy-teacher").unwrap();
    cfg.head = distilkit::models::HeadKind::Linear;
    let mut model: Model<f32> = Model::init(&cfg, &mut Rng::new(7)).unwrap();
    let wave: Vec<f32> = (0..9600)
        .map(|i| (i as f32 * 2.0 * 3.14159 * 440.0 / 16000.0).sin() * 0.3)
        .collect();
    let frames = cfg.frame_count(wave.len()).unwrap();
    let labels: Vec<usize> = (0..frames).map(|f| (f * 7) % 32).collect();

    let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam: Adam<f32> = Adam::new(&sizes);
    for step in 1..=200 {
        let mut tape = Tape::<f32>::new();
        let fwd = model.forward_train(&mut tape, &wave, None).unwrap();
        let loss = ce_rows(&mut tape, fwd.logits, &labels, None, Reduction::Mean).unwrap();
        let v = tape.scalar_value(loss);
        tape.backward(loss).unwrap();
        let grads: Vec<Option<Vec<f32>>> =
            fwd.param_vars.iter().map(|&pv| tape.grad(pv).map(|g| g.to_vec())).collect();
        drop(tape);
        adam.step(model.parameters_mut(), &grads, 1e-3);
        if step % 25 == 0 || step == 1 {
            println!("step {step:>3} loss {v:.4}");
        }
    }
}

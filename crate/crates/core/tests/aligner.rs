mod common;

use common::*;
use vistask_core::aligner::{
    forward, synth_embeddings, train, AlignerConfig, AlignerModel, EmbedConfig, Prototypes, TrainConfig, TrainSample,
};
use vistask_core::encode::{encode_category, EncodeConfig};
use vistask_core::grid::{BBox, Instance};

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{what}[{i}]: {x} vs {y}");
    }
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    for (heads, positional, seed) in [(1, true, 3), (2, true, 4), (4, false, 5)] {
        let cfg = AlignerConfig {
            positional,
            ..tiny_config(heads)
        };
        let model = random_model(cfg, seed);
        let (emb, loc) = random_inputs(&cfg, seed + 10);
        let (out, _) = forward(&model, &emb, &loc).unwrap();
        let (m, h, w) = oracle_forward(&model, &emb, &loc);
        assert_close(out.m_logits.data(), &m, 1e-10, "m");
        assert_close(out.h_map.data(), &h, 1e-10, "h");
        assert_close(out.w_map.data(), &w, 1e-10, "w");
    }
}

#[test]
fn default_sized_forward_matches_oracle() {
    let cfg = AlignerConfig {
        grid: 8,
        ..AlignerConfig::default()
    };
    let model = AlignerModel::new(cfg, 1).unwrap();
    let (emb, loc) = random_inputs(&cfg, 2);
    let (out, _) = forward(&model, &emb, &loc).unwrap();
    let (m, h, w) = oracle_forward(&model, &emb, &loc);
    assert_close(out.m_logits.data(), &m, 1e-10, "m");
    assert_close(out.h_map.data(), &h, 1e-10, "h");
    assert_close(out.w_map.data(), &w, 1e-10, "w");
}

#[test]
fn every_parameter_group_matches_finite_differences() {
    for (name, err, norm) in aligner_fd_errors(tiny_config(2), 21, 1e-6) {
        assert!(norm > 0.0, "{name} has no gradient signal");
        assert!(err < 1e-6, "{name}: relative error {err:e}");
    }
}

#[test]
fn single_sample_is_memorized() {
    let cfg = AlignerConfig {
        dim: 16,
        grid: 8,
        blocks: 1,
        ..AlignerConfig::default()
    };
    let protos = Prototypes::random(16, 2, 0, 4).unwrap();
    let scene = [Instance::new(1, BBox::new(40.0, 40.0, 90.0, 100.0).unwrap())];
    let embed = EmbedConfig {
        grid: 8,
        ..EmbedConfig::default()
    };
    let (emb, _) = synth_embeddings(&scene, 128.0, 128.0, &protos, &embed, 0).unwrap();
    let targets = encode_category(
        &scene,
        1,
        128.0,
        128.0,
        &EncodeConfig {
            grid: 8,
            ..EncodeConfig::default()
        },
    )
    .unwrap();
    let sample = TrainSample {
        embeddings: std::sync::Arc::new(emb),
        loc: protos.classes[1].clone(),
        heatmap: targets.heatmap,
        sizes: targets.sizes,
        supervise_size: true,
    };
    let mut model = AlignerModel::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        steps: 600,
        batch_size: 1,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &vec![sample], &tc).unwrap();
    let last = report.final_loss().unwrap();
    assert!(last < 1e-2, "final loss {last}");
}

#[test]
fn object_cells_are_closest_to_their_prototype() {
    // Unsmoothed embeddings: each covered cell is its prototype plus noise.
    let protos = Prototypes::random(64, 3, 0, 11).unwrap();
    let cfg = EmbedConfig {
        grid: 100,
        noise_sigma: 0.1,
        blur_sigma: 0.0,
        part_extent: 0.0,
    };
    let scene = [Instance::new(2, BBox::new(0.0, 0.0, 100.0, 100.0).unwrap())];
    let (emb, _) = synth_embeddings(&scene, 100.0, 100.0, &protos, &cfg, 5).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut wins = 0;
    for r in 0..100 {
        for c in 0..100 {
            let cell = emb.cell(r, c);
            let own = cos(cell, &protos.classes[2]);
            let others = protos
                .all()
                .filter(|p| *p != &protos.classes[2])
                .map(|p| cos(cell, p))
                .fold(f64::NEG_INFINITY, f64::max);
            wins += (own > others) as usize;
        }
    }
    assert!(wins as f64 / 1e4 > 0.99, "{wins} of 10000");
}

//! End-to-end canary: overfit a small model on one easy sequence, then track
//! it. Training must lift mean IoU far above the untrained model and the
//! loss must drop hard. Catches wiring bugs between the training loop, the
//! checkpoint, and the tracker that no unit test sees.

use predtrack::checkpoint::load_checkpoint;
use predtrack::geometry::iou;
use predtrack::model::{ModelConfig, TrackModel};
use predtrack::predictor::TransformerConfig;
use predtrack::synth::{SequenceSpec, SyntheticSequence};
use predtrack::tracker::{run_tracker, TrackerConfig};
use predtrack::trainlab::{pool_spec, smoothed_endpoints, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn canary_config() -> TrainConfig {
    TrainConfig {
        seed: 40,
        steps: 2000,
        batch: 2,
        lr: 2e-3,
        window: 30,
        augment: true,
        num_sequences: 1,
        sequence: SequenceSpec {
            seed: 900,
            length: 30,
            canvas: 96,
            distractors: 0,
            speed: 1.2,
            ..SequenceSpec::default()
        },
        model: ModelConfig {
            width: 16,
            backbone_channels: 8,
            patch_px: 96,
            box_head_width: 8,
            extent_hidden1: 8,
            extent_hidden2: 16,
            // narrow crop: the target spans a couple of grid cells, so the
            // label peak stays visible and box offsets stay representable
            sigma_ratio: 0.3,
            search_factor: 3.0,
            transformer: TransformerConfig {
                heads: 2,
                ffn_width: 32,
                dropout: 0.0,
                enc_layers: 1,
                dec_layers: 1,
                shared_query: true,
                two_queries: false,
            },
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn mean_track_iou(model: &TrackModel, seq: &SyntheticSequence) -> f64 {
    let frames = (0..seq.len()).map(|t| Ok(seq.render(t)));
    let cfg = TrackerConfig {
        search_factor: model.cfg.search_factor,
        ..TrackerConfig::default()
    };
    let out = run_tracker(model, cfg, seq.gt(0), frames).unwrap();
    let n = (seq.len() - 1) as f64;
    (1..seq.len())
        .map(|t| iou(&out[t].bbox, seq.gt(t)))
        .sum::<f64>()
        / n
}

#[test]
fn overfit_training_lifts_tracking_quality() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = canary_config();
    let seq = SyntheticSequence::generate(&pool_spec(&cfg, 0)).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let untrained = TrackModel::init(cfg.model.clone(), &mut rng).unwrap();
    let before = mean_track_iou(&untrained, &seq);

    let report = train(&cfg, dir.path(), None).unwrap();
    let (head, tail) = smoothed_endpoints(&report.trace, 25);
    println!("canary loss: {head:.4} -> {tail:.4}");
    assert!(
        tail < 0.5 * head,
        "smoothed loss fell only {head:.4} -> {tail:.4}"
    );

    let (trained, _) = load_checkpoint(&report.checkpoint).unwrap();
    {
        use predtrack::graph::Graph;
        use predtrack::trainlab::sample_triplet;
        let mut srng = ChaCha12Rng::seed_from_u64(999);
        let item = sample_triplet(&seq, &trained.cfg, 30, false, &mut srng).unwrap();
        let mut g = Graph::new(false);
        let mut b = predtrack::nn::Binder::new(&trained.store, false);
        let mut drng = ChaCha12Rng::seed_from_u64(0);
        let out = trained.train_forward(&mut g, &mut b, &item, &mut drng).unwrap();
        let smax = g
            .value(out.scores)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mem: Vec<_> = item
            .train
            .iter()
            .map(|f| {
                trained
                    .encode_training_frame(&f.patch, &f.target)
                    .unwrap()
                    .tokens
            })
            .collect();
        let p = trained.predict(&mem, &item.test.patch, &[]).unwrap();
        // training-time and inference-time forward passes must agree
        assert!(
            (smax - p.scores.max_value()).abs() < 1e-9,
            "train pass peaks at {smax}, inference pass at {}",
            p.scores.max_value()
        );
    }
    let after = mean_track_iou(&trained, &seq);
    println!("canary mean IoU: untrained {before:.3}, trained {after:.3}");
    assert!(
        after > before + 0.3,
        "training moved mean IoU only {before:.3} -> {after:.3}"
    );
    assert!(after > 0.5, "trained mean IoU {after:.3} too low");
}

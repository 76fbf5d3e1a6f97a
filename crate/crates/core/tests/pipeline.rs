use std::collections::BTreeMap;
use ttrally::ball::ReconParams;
use ttrally::model::TableGeometry;
use ttrally::pipeline::{
    filter_points, format_reconstruction, parse_reconstruction, reconstruct_all, reconstruct_track, FilterPolicy,
    ReconstructionFile, StoredPoint,
};
use ttrally::rng;
use ttrally::synth::{emit_synthetic_track, generate_corpus, CameraSampler, RallyParams};

#[test]
fn reconstructed_corpus_survives_a_file_round_trip() {
    let table = TableGeometry::ittf();
    let sampler = CameraSampler::default();
    let rallies = generate_corpus(0, 6, 21, &RallyParams::default(), &table);
    let tracks: Vec<_> = rallies
        .iter()
        .map(|r| {
            let cam = sampler.sample(&mut rng::stream(21, r.point.id), &table);
            emit_synthetic_track(r, &cam, &table, (sampler.width, sampler.height), 0.5, 21).unwrap()
        })
        .collect();
    let params = ReconParams::for_fps(60.0);
    let attempts = reconstruct_all(&tracks, &table, &params);
    let (kept, report) = filter_points(attempts, &FilterPolicy { mse_threshold: params.mse_threshold });
    assert_eq!(report.total, 6);
    assert!(report.kept >= 4, "{report:?}");

    let file = ReconstructionFile {
        table,
        meta: BTreeMap::from([("seed".to_string(), "21".to_string())]),
        points: kept
            .iter()
            .map(|r| StoredPoint {
                point: r.point.clone(),
                camera: Some(r.camera),
                calibration_rms: Some(r.calibration_rms),
                complete: true,
            })
            .collect(),
    };
    let text = format_reconstruction(&file);
    assert_eq!(parse_reconstruction(&text).unwrap(), file);
}

#[test]
fn batch_reconstruction_matches_one_at_a_time() {
    let table = TableGeometry::ittf();
    let sampler = CameraSampler::default();
    let rallies = generate_corpus(40, 4, 5, &RallyParams::default(), &table);
    let tracks: Vec<_> = rallies
        .iter()
        .map(|r| {
            let cam = sampler.sample(&mut rng::stream(5, r.point.id), &table);
            emit_synthetic_track(r, &cam, &table, (sampler.width, sampler.height), 1.0, 5).unwrap()
        })
        .collect();
    let params = ReconParams::for_fps(60.0);
    let batch = reconstruct_all(&tracks, &table, &params);
    for (t, b) in tracks.iter().zip(&batch) {
        let one = reconstruct_track(t, &table, &params);
        assert_eq!(one.as_ref().ok().map(|r| &r.point), b.as_ref().ok().map(|r| &r.point));
    }
}

#[test]
fn nominal_shot_speeds_average_to_the_configured_mean() {
    let table = TableGeometry::ittf();
    let params = RallyParams::default();
    let rallies = generate_corpus(0, 500, 99, &params, &table);
    let speeds: Vec<f64> = rallies.iter().flat_map(|r| r.shots.iter().filter_map(|s| s.speed)).collect();
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    assert!(speeds.len() >= 500);
    assert!((mean / params.mean_speed - 1.0).abs() < 0.02, "mean {mean} over {} shots", speeds.len());
}

//! Toy conditional diffusion model over procedural 16×16 scenes.

pub mod denoiser;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod train;

pub use denoiser::{Adaptation, Denoiser, DenoiserConfig, DenoiserInput, LayerId, NoAdaptation, Projection};
pub use sampler::{sample, sample_observed, timestep_grid};
pub use scene::{
    render_ideal, render_varied, FigureSpec, IntensityBand, Quadrant, SceneAttributes, SceneImage, ShapeClass,
};
pub use schedule::NoiseSchedule;
pub use train::{
    denoise_loss, denoise_loss_on_tape, draw_batch, prediction_loss, procedural_dataset, train_base, TrainConfig,
    TrainReport, TrainingExample,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RandomSource, Tape};
    use scene::{patchify, IMAGE_SIZE};

    #[test]
    fn loss_of_exact_prediction_is_zero() {
        let img = render_ideal(&SceneAttributes::all()[0]);
        let mut tape = Tape::new();
        let pred = tape.constant(patchify(img.pixels()));
        let l = prediction_loss(&mut tape, pred, &img, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn loss_of_offset_prediction_is_one() {
        let img = render_ideal(&SceneAttributes::all()[9]);
        let mut tape = Tape::new();
        let pred = tape.constant(patchify(&img.pixels().map(|v| v + 1.0)));
        let l = prediction_loss(&mut tape, pred, &img, 1.0).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_non_negative() {
        let mut rng = RandomSource::new(8);
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut rng).unwrap();
        let s = NoiseSchedule::cosine(20).unwrap();
        let data = procedural_dataset(4, 0.0, &mut rng);
        for (i, ex) in data.iter().enumerate() {
            let eps = rng.normal_tensor(&[IMAGE_SIZE, IMAGE_SIZE], 1.0);
            let l = denoise_loss(&model, &NoAdaptation, &s, ex, 1 + i * 5, &eps).unwrap();
            assert!(l > 0.0 && l.is_finite());
        }
    }

    #[test]
    fn base_training_reduces_loss() {
        let mut rng = RandomSource::new(21);
        let mut model = Denoiser::new(DenoiserConfig::default(), &mut rng).unwrap();
        let s = NoiseSchedule::cosine(50).unwrap();
        let data = procedural_dataset(64, 0.1, &mut rng);
        let cfg = TrainConfig {
            steps: 150,
            batch: 8,
            lr: 3e-3,
            clip: 1.0,
        };
        let report = train_base(&mut model, &data, &s, &cfg, &mut rng).unwrap();
        assert_eq!(report.losses.len(), 150);
        assert!(report.last_decile() < report.first_decile());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut rng = RandomSource::new(0);
        let mut model = Denoiser::new(DenoiserConfig::tiny(), &mut rng).unwrap();
        let s = NoiseSchedule::cosine(10).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            batch: 1,
            lr: 1e-3,
            clip: 0.0,
        };
        assert!(train_base(&mut model, &[], &s, &cfg, &mut rng).is_err());
    }

    #[test]
    fn divergence_names_the_step() {
        let mut rng = RandomSource::new(0);
        let mut model = Denoiser::new(DenoiserConfig::tiny(), &mut rng).unwrap();
        let s = NoiseSchedule::cosine(10).unwrap();
        let mut data = procedural_dataset(2, 0.0, &mut rng);
        // a poisoned conditioning vector makes the very first loss NaN
        for ex in &mut data {
            ex.cond[0] = f64::NAN;
        }
        let cfg = TrainConfig {
            steps: 3,
            batch: 2,
            lr: 1e-3,
            clip: 0.0,
        };
        match train_base(&mut model, &data, &s, &cfg, &mut rng) {
            Err(crate::Error::Training { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected training error, got {other:?}"),
        }
    }
}

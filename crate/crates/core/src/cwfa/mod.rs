//! Conditional wavelet flow: a deterministic low-resolution predictor plus
//! one conditional flow per Haar level over the depth axis.

mod conditions;
mod config;
mod model;
mod train;

pub use conditions::{build_conditions, mean_of, ConditionSet, Prior};
pub use config::CWFAConfig;
pub use model::{load_model, save_model, CWFAModel, LRNet, LevelNet};
pub use train::{schedule, train, EpochRecord, Stage, TrainReport};

#[cfg(test)]
pub(crate) mod testutil {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;
    use crate::optics::{make_layout, LensletLayout};

    pub fn tiny_config() -> CWFAConfig {
        CWFAConfig {
            levels: 2,
            blocks_per_level: 2,
            conv_channels: 4,
            epochs: 6,
            epochs_per_level: 2,
            ..CWFAConfig::default()
        }
    }

    pub fn tiny_layout() -> LensletLayout {
        make_layout(3, (32, 32), (8, 8), 9.0).unwrap()
    }

    /// Random positive volumes and images with matching shapes.
    pub fn tiny_data(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vols = (0..n).map(|_| Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut rng)).collect();
        let imgs = (0..n).map(|_| Tensor::uniform(&[32, 32], 0.0, 1.0, &mut rng)).collect();
        (vols, imgs)
    }

    pub fn tiny_model(seed: u64) -> (CWFAModel, Vec<Tensor>, Vec<Tensor>) {
        let (vols, imgs) = tiny_data(4, seed);
        let layout = tiny_layout();
        let prior = Prior::from_training(&vols, &imgs, &layout).unwrap();
        let model = CWFAModel::new(tiny_config(), layout, prior).unwrap();
        (model, vols, imgs)
    }

    pub fn perturb(model: &mut CWFAModel, std: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let p = model.store.get_mut(id);
            let noise = Tensor::randn(p.value.shape(), std, &mut rng);
            p.value.add_assign(&noise).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::archive::Archive;
    use crate::error::Error;
    use crate::haar::{haar_up_axial, HaarPair};
    use crate::numerics::{grad_check, Tensor};

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

    #[test]
    fn pyramid_rebuilds_volume() {
        let (vols, _) = tiny_data(1, 3);
        let t = conditions::targets(&vols[0], 2).unwrap();
        let mut v = t.approx[2].clone();
        for i in (0..2).rev() {
            v = haar_up_axial(&HaarPair {
                approx: v,
                detail: t.details[i].clone(),
            })
            .unwrap();
        }
        assert!(v.max_abs_diff(&vols[0]).unwrap() < 1e-6);
    }

    #[test]
    fn zero_temperature_is_deterministic() {
        let (mut m, _, imgs) = tiny_model(1);
        perturb(&mut m, 0.05, 2);
        let a = m.reconstruct(&imgs[0], 0.0, 1).unwrap();
        let b = m.reconstruct(&imgs[0], 0.0, 99).unwrap();
        assert_eq!(a, b);
        m.config.project_to_prior = false;
        let c = m.reconstruct(&imgs[0], 0.7, 1).unwrap();
        let d = m.reconstruct(&imgs[0], 0.7, 1).unwrap();
        let e = m.reconstruct(&imgs[0], 0.7, 2).unwrap();
        assert_eq!(c, d);
        assert!(c.max_abs_diff(&e).unwrap() > 1e-4);
    }

    #[test]
    fn identity_init_scores_prior_detail_at_gaussian_entropy() {
        let (m, _, imgs) = tiny_model(4);
        let c = m.conditions(&imgs[0]).unwrap();
        // zero latents decode to details equal to the modulated prior detail
        let zs: Vec<_> = m.encode(&m.prior.volume, &c).unwrap().0.iter().map(|z| Tensor::zeros(z.shape())).collect();
        let coarse = Tensor::full(&[1, 8, 8], 0.5);
        let v = m.decode(&zs, &coarse, &c).unwrap();
        let ll = m.total_loglik(&v, &c).unwrap();
        assert_eq!(ll.len(), m.config.levels + 1);
        for x in &ll[..2] {
            assert!((x - HALF_LN_2PI).abs() < 1e-9, "{x}");
        }
        assert!(ll[2] >= HALF_LN_2PI);
        // any other detail costs more
        let flat = Tensor::from_fn(&[4, 8, 8], |i| ((i % 64) as f32 * 0.1).sin());
        let ll = m.total_loglik(&flat, &c).unwrap();
        assert!(ll[..2].iter().all(|&x| x > HALF_LN_2PI));
    }

    #[test]
    fn level_loss_decomposes() {
        let (mut m, vols, imgs) = tiny_model(5);
        perturb(&mut m, 0.05, 6);
        let c = m.conditions(&imgs[1]).unwrap();
        for i in 0..2 {
            let (nll, spatial, total) = m.level_loss(i, &vols[1], &c).unwrap();
            assert!((total - (nll + m.config.alpha * spatial)).abs() < 1e-6);
            assert!(spatial >= 0.0);
        }
    }

    #[test]
    fn levels_are_independent() {
        let (mut m, vols, imgs) = tiny_model(7);
        let c = m.conditions(&imgs[0]).unwrap();
        let before: Vec<_> = (0..2).map(|i| m.level_loss(i, &vols[0], &c).unwrap()).collect();
        let lr_before = m.lr_loss(&vols[0], &c).unwrap();
        for id in m.levels[1].params() {
            let p = m.store.get_mut(id);
            p.value = p.value.map(|x| x + 0.3);
        }
        assert_eq!(m.level_loss(0, &vols[0], &c).unwrap(), before[0]);
        assert_eq!(m.lr_loss(&vols[0], &c).unwrap(), lr_before);
        assert_ne!(m.level_loss(1, &vols[0], &c).unwrap(), before[1]);
    }

    #[test]
    fn level_gradients_match_differences() {
        let (mut m, vols, imgs) = tiny_model(8);
        perturb(&mut m, 0.05, 9);
        let c = m.conditions(&imgs[2]).unwrap();
        let mut store = m.store.clone();
        for i in 0..2 {
            let err = grad_check(&mut store, |g, s| m.level_objective(g, s, i, &vols[2], &c), 5e-4).unwrap();
            assert!(err < 1e-3, "level {i}: {err}");
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let (mut m, _, imgs) = tiny_model(10);
        perturb(&mut m, 0.05, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cwfa");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        let a = m.reconstruct(&imgs[0], 0.0, 0).unwrap();
        let b = back.reconstruct(&imgs[0], 0.0, 0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(m.to_archive().unwrap().to_bytes().unwrap(), back.to_archive().unwrap().to_bytes().unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (m, _, _) = tiny_model(12);
        let mut bytes = m.to_archive().unwrap().to_bytes().unwrap();
        bytes[0] = b'Z';
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::BadMagic(_))));
        let mut a = m.to_archive().unwrap();
        a.set_tensor("lr/view/conv2/w", Tensor::zeros(&[1]));
        assert!(CWFAModel::from_archive(&a).is_err());
    }

    #[test]
    fn schedule_cycles_coarse_to_fine() {
        let s = schedule(2, 7, 2);
        use Stage::*;
        assert_eq!(s, vec![LowRes, LowRes, Level(1), Level(1), Level(0), Level(0), LowRes]);
    }

    #[test]
    fn training_lowers_the_objective() {
        let (mut m, vols, imgs) = tiny_model(13);
        m.config.epochs = 30;
        m.config.epochs_per_level = 10;
        let rep = train(&mut m, &vols, &imgs).unwrap();
        assert_eq!(rep.epochs.len(), 30);
        for stage in [Stage::LowRes, Stage::Level(0), Stage::Level(1)] {
            let c = rep.curve(stage);
            assert!(c.last().unwrap() < c.first().unwrap(), "{stage}: {c:?}");
        }
        for (a, b) in rep.final_nll.iter().zip(&rep.initial_nll) {
            assert!(a < b);
        }
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let (m, vols, imgs) = tiny_model(14);
        let c = m.conditions(&imgs[0]).unwrap();
        assert!(m.total_loglik(&Tensor::zeros(&[2, 8, 8]), &c).is_err());
        assert!(m.level_loss(5, &vols[0], &c).is_err());
        assert!(m.reconstruct(&Tensor::zeros(&[8, 8]), 0.0, 0).is_err());
        let mut bad = tiny_config();
        bad.levels = 3;
        let prior = Prior::from_training(&vols, &imgs, &tiny_layout()).unwrap();
        assert!(CWFAModel::new(bad, tiny_layout(), prior).is_err());
    }
}

//! Per-stripe colour histograms: a deterministic hand-crafted featurizer
//! that yields both a global vector and one local vector per horizontal
//! stripe.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gallery::EmbeddingSet;
use crate::imaging::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub stripes: usize,
    pub bins: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self { stripes: 8, bins: 8 }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stripes == 0 {
            return Err(Error::invalid("stripe count must be positive"));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(Error::invalid(format!(
                "bins per channel must be in 2..=256, got {}",
                self.bins
            )));
        }
        Ok(())
    }

    /// Length of each stripe vector and of the global vector.
    pub fn dim(&self) -> usize {
        3 * self.bins
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StripeFeatures {
    pub global: Vec<f32>,
    /// One vector of length `3 * bins` per stripe, top to bottom.
    pub local: Vec<Vec<f32>>,
}

/// Rows covered by stripe `s` of `stripes` over `height` rows.
pub fn stripe_rows(s: usize, stripes: usize, height: usize) -> std::ops::Range<usize> {
    (s * height / stripes)..((s + 1) * height / stripes)
}

fn l1_normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
}

pub fn stripe_histogram(img: &Image, cfg: &FeaturizerConfig) -> Result<StripeFeatures> {
    cfg.validate()?;
    if img.channels() != 3 {
        return Err(Error::shape(format!(
            "featurizer needs an RGB image, got {} channels",
            img.channels()
        )));
    }
    if img.height() < cfg.stripes {
        return Err(Error::invalid(format!(
            "image height {} is smaller than the stripe count {}",
            img.height(),
            cfg.stripes
        )));
    }
    let b = cfg.bins;
    let dim = cfg.dim();
    let mut local = Vec::with_capacity(cfg.stripes);
    let mut global = vec![0.0f64; dim];
    for s in 0..cfg.stripes {
        let mut hist = vec![0.0f64; dim];
        for y in stripe_rows(s, cfg.stripes, img.height()) {
            for x in 0..img.width() {
                for (c, &v) in img.pixel(x, y).iter().enumerate() {
                    hist[c * b + usize::from(v) * b / 256] += 1.0;
                }
            }
        }
        l1_normalize(&mut hist);
        global.iter_mut().zip(&hist).for_each(|(g, h)| *g += h);
        local.push(hist.iter().map(|&v| v as f32).collect());
    }
    l1_normalize(&mut global);
    Ok(StripeFeatures {
        global: global.iter().map(|&v| v as f32).collect(),
        local,
    })
}

/// Featurize a batch of images into a row-aligned embedding set with
/// local features.
pub fn featurize_all(images: &[Image], cfg: &FeaturizerConfig) -> Result<EmbeddingSet> {
    let feats: Vec<StripeFeatures> = images
        .par_iter()
        .map(|img| stripe_histogram(img, cfg))
        .collect::<Result<_>>()?;
    let n = feats.len();
    let d = cfg.dim();
    let mut global = Array2::zeros((n, d));
    let mut local = Array3::zeros((n, cfg.stripes, d));
    for (i, f) in feats.iter().enumerate() {
        for (j, &v) in f.global.iter().enumerate() {
            global[[i, j]] = v;
        }
        for (s, stripe) in f.local.iter().enumerate() {
            for (j, &v) in stripe.iter().enumerate() {
                local[[i, s, j]] = v;
            }
        }
    }
    EmbeddingSet::new(global, Some(local))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::resize_nearest;
    use proptest::prelude::*;

    #[test]
    fn uniform_red() {
        let img = Image::filled(8, 8, [255, 0, 0]).unwrap();
        let f = stripe_histogram(&img, &FeaturizerConfig { stripes: 8, bins: 4 }).unwrap();
        let third = 1.0f32 / 3.0;
        let mut expected = vec![0.0f32; 12];
        expected[3] = third; // R bin 3
        expected[4] = third; // G bin 0
        expected[8] = third; // B bin 0
        for stripe in &f.local {
            for (a, b) in stripe.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        for (a, b) in f.global.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_gray_levels_by_counting() {
        // 4 wide, 2 tall. Top row: 0,0,0,255. Bottom row: 255,255,0,255.
        let rows = [[0u8, 0, 0, 255], [255, 255, 0, 255]];
        let pixels = rows.iter().flatten().flat_map(|&v| [v, v, v]).collect();
        let img = Image::new(4, 2, 3, pixels).unwrap();
        let f = stripe_histogram(&img, &FeaturizerConfig { stripes: 2, bins: 2 }).unwrap();

        // Oracle: count dark/bright per stripe directly; the three channels
        // are identical so each channel block holds the same counts.
        for (s, row) in rows.iter().enumerate() {
            let dark = row.iter().filter(|&&v| v < 128).count() as f32;
            let bright = row.len() as f32 - dark;
            let total = 3.0 * row.len() as f32;
            let block = [dark / total, bright / total];
            let expected: Vec<f32> = block.iter().copied().cycle().take(6).collect();
            for (a, b) in f.local[s].iter().zip(&expected) {
                assert!((a - b).abs() < 1e-7, "stripe {s}: {:?}", f.local[s]);
            }
        }
        // Global is the mean of the two stripes: dark (3/4 + 1/4) / 2 per channel.
        assert!((f.global[0] - 0.5 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn height_below_stripes_errors() {
        let img = Image::filled(4, 3, [1, 2, 3]).unwrap();
        assert!(stripe_histogram(&img, &FeaturizerConfig { stripes: 4, bins: 8 }).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let a = Image::filled(3, 8, [10, 200, 30]).unwrap();
        let b = Image::filled(3, 8, [250, 2, 130]).unwrap();
        let cfg = FeaturizerConfig::default();
        let set = featurize_all(&[a.clone(), b], &cfg).unwrap();
        let fa = stripe_histogram(&a, &cfg).unwrap();
        assert_eq!(set.global().row(0).to_vec(), fa.global);
        assert_eq!(set.local().unwrap().dim(), (2, 8, 24));
    }

    fn arb_image() -> impl Strategy<Value = (Image, usize)> {
        (1usize..5, 1usize..6, 1usize..4).prop_flat_map(|(stripes, w, per)| {
            let h = stripes * per;
            proptest::collection::vec(any::<u8>(), w * h * 3)
                .prop_map(move |p| (Image::new(w, h, 3, p).unwrap(), stripes))
        })
    }

    proptest! {
        #[test]
        fn stripes_sum_to_one((img, stripes) in arb_image(), bins in 2usize..10) {
            let f = stripe_histogram(&img, &FeaturizerConfig { stripes, bins }).unwrap();
            for s in &f.local {
                prop_assert!((s.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
            prop_assert!((f.global.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }

        // Holds when the stripe count divides the height, so stripe
        // boundaries land on whole source rows after upscaling.
        #[test]
        fn invariant_to_integer_upscaling((img, stripes) in arb_image(), k in 2usize..4) {
            let cfg = FeaturizerConfig { stripes, bins: 4 };
            let up = resize_nearest(&img, img.width() * k, img.height() * k).unwrap();
            let a = stripe_histogram(&img, &cfg).unwrap();
            let b = stripe_histogram(&up, &cfg).unwrap();
            for (x, y) in a.global.iter().zip(&b.global) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn permuting_within_a_stripe((img, stripes) in arb_image(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let cfg = FeaturizerConfig { stripes, bins: 4 };
            let rows = stripe_rows(0, stripes, img.height());
            let w = img.width();
            let mut px: Vec<[u8; 3]> = rows.clone()
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .map(|(x, y)| img.pixel(x, y).try_into().unwrap())
                .collect();
            px.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut shuffled = img.clone();
            for (i, p) in px.iter().enumerate() {
                shuffled.pixel_mut(i % w, rows.start + i / w).copy_from_slice(p);
            }
            let a = stripe_histogram(&img, &cfg).unwrap();
            let b = stripe_histogram(&shuffled, &cfg).unwrap();
            prop_assert_eq!(&a.local[0], &b.local[0]);
        }
    }
}

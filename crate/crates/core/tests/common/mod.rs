//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use reid_core::gallery::{GalleryIndex, GalleryRecord, Role};
use reid_core::imaging::{Image, Mask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    let normal = Normal::new(0.0, scale).unwrap();
    Array1::from_shape_fn(n, |_| normal.sample(rng))
}

pub struct SyntheticGallery {
    pub index: GalleryIndex,
    pub embeddings: Array2<f64>,
    pub min_centroid_distance: f64,
    pub noise_norm: f64,
}

/// `ids × cams` rows of `centroid[pid] + shift[cam] + noise`.
pub fn synthetic_gallery(ids: u32, cams: u32, dim: usize, noise: f64, seed: u64) -> SyntheticGallery {
    let mut r = rng(seed);
    let centroids: Vec<Array1<f64>> = (0..ids).map(|_| gaussian(&mut r, dim, 3.0)).collect();
    let shifts: Vec<Array1<f64>> = (0..cams).map(|_| gaussian(&mut r, dim, 0.15)).collect();
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for p in 0..ids {
        for c in 0..cams {
            records.push(GalleryRecord {
                person_id: p + 1,
                camera_id: c + 1,
                path: format!("{:04}_c{}_000.ppm", p + 1, c + 1),
                role: Role::Gallery,
            });
            rows.push(&centroids[p as usize] + &shifts[c as usize] + &gaussian(&mut r, dim, noise));
        }
    }
    let mut min_centroid_distance = f64::INFINITY;
    for a in 0..centroids.len() {
        for b in (a + 1)..centroids.len() {
            let d = &centroids[a] - &centroids[b];
            min_centroid_distance = min_centroid_distance.min(d.dot(&d).sqrt());
        }
    }
    let n = rows.len();
    let embeddings = Array2::from_shape_fn((n, dim), |(i, k)| rows[i][k]);
    SyntheticGallery {
        index: GalleryIndex::new(records),
        embeddings,
        min_centroid_distance,
        noise_norm: noise * (dim as f64).sqrt(),
    }
}

pub const FIGURE_COLORS: [[u8; 3]; 4] = [[220, 40, 40], [40, 220, 40], [40, 40, 220], [220, 220, 40]];
pub const BACKGROUND_COLORS: [[u8; 3]; 4] = [[130, 90, 10], [10, 130, 90], [90, 10, 130], [160, 160, 160]];
pub const FIXTURE_W: usize = 16;
pub const FIXTURE_H: usize = 32;

/// Body rectangle: columns 5..11, rows 4..28.
pub fn body_mask() -> Mask {
    let values = (0..FIXTURE_H)
        .flat_map(|y| (0..FIXTURE_W).map(move |x| u8::from((5..11).contains(&x) && (4..28).contains(&y))))
        .collect();
    Mask::new(FIXTURE_W, FIXTURE_H, values).unwrap()
}

pub fn figure_image(figure: [u8; 3], background: [u8; 3]) -> Image {
    let mask = body_mask();
    let mut img = Image::filled(FIXTURE_W, FIXTURE_H, background).unwrap();
    for y in 0..FIXTURE_H {
        for x in 0..FIXTURE_W {
            if mask.get(x, y) {
                img.pixel_mut(x, y).copy_from_slice(&figure);
            }
        }
    }
    img
}

pub struct ImageFixture {
    pub queries: GalleryIndex,
    pub gallery: GalleryIndex,
    pub query_images: Vec<Image>,
    pub gallery_images: Vec<Image>,
    pub query_masks: Vec<Mask>,
    pub gallery_masks: Vec<Mask>,
}

/// Each person wears one colour everywhere. The query of person `p` is
/// shot against background `p`; the gallery image of person `p` against
/// background `p - 1`, so every query shares its background with the
/// gallery image of the *next* person.
pub fn adversarial_background_fixture() -> ImageFixture {
    let n = FIGURE_COLORS.len();
    let mut f = ImageFixture {
        queries: GalleryIndex::default(),
        gallery: GalleryIndex::default(),
        query_images: Vec::new(),
        gallery_images: Vec::new(),
        query_masks: Vec::new(),
        gallery_masks: Vec::new(),
    };
    for p in 0..n {
        let pid = p as u32 + 1;
        f.queries.records.push(GalleryRecord {
            person_id: pid,
            camera_id: 1,
            path: format!("{pid:04}_c1_000.ppm"),
            role: Role::Query,
        });
        f.query_images.push(figure_image(FIGURE_COLORS[p], BACKGROUND_COLORS[p]));
        f.query_masks.push(body_mask());

        f.gallery.records.push(GalleryRecord {
            person_id: pid,
            camera_id: 2,
            path: format!("{pid:04}_c2_000.ppm"),
            role: Role::Gallery,
        });
        f.gallery_images
            .push(figure_image(FIGURE_COLORS[p], BACKGROUND_COLORS[(p + n - 1) % n]));
        f.gallery_masks.push(body_mask());
    }
    f
}

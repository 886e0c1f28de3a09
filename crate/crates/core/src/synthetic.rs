//! Seeded generators for synthetic datasets used by tests, benchmarks and
//! demos.
//!
//! Scenes are mosaics of 16x16 pixel tiles. Each tile carries a random
//! pattern inside a 2 pixel border of constant gray, so with the default
//! 8 pixel cells every tile maps onto its own 2x2 block of feature cells and
//! those cells do not depend on the neighboring tiles. Rearranging tiles
//! therefore rearranges feature cells exactly, which makes it possible to
//! build images with identical global statistics but different geometry.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::events::{Event, EventStream, Polarity};
use crate::image::Image;

pub const TILE_PX: usize = 16;
const TILE_BORDER: usize = 2;
const BORDER_GRAY: f64 = 0.5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major `TILE_PX x TILE_PX` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile(Vec<f64>);

impl Tile {
    pub fn random(rng: &mut impl Rng) -> Self {
        let fx = rng.random_range(-1.2..1.2);
        let fy = rng.random_range(-1.2..1.2);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.15..0.35);
        let (bx, by) = (rng.random_range(3.0..13.0), rng.random_range(3.0..13.0));
        let br = rng.random_range(1.5..4.5);
        let bv = rng.random_range(-0.35..0.35);
        let rect = (
            rng.random_range(2..8usize),
            rng.random_range(2..8usize),
            rng.random_range(3..7usize),
            rng.random_range(3..7usize),
        );
        let rv = rng.random_range(-0.3..0.3);
        let mut px = vec![BORDER_GRAY; TILE_PX * TILE_PX];
        for y in TILE_BORDER..TILE_PX - TILE_BORDER {
            for x in TILE_BORDER..TILE_PX - TILE_BORDER {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.5 + amp * (fx * xf + fy * yf + phase).sin();
                if (xf - bx).hypot(yf - by) < br {
                    v += bv;
                }
                if (rect.0..rect.0 + rect.2).contains(&x) && (rect.1..rect.1 + rect.3).contains(&y) {
                    v += rv;
                }
                px[y * TILE_PX + x] = v.clamp(0.0, 1.0);
            }
        }
        Tile(px)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0[y * TILE_PX + x]
    }
}

/// A rectangular arrangement of tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<Tile>,
}

impl Mosaic {
    pub fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Self {
        Mosaic {
            rows,
            cols,
            tiles: (0..rows * cols).map(|_| Tile::random(rng)).collect(),
        }
    }

    pub fn tile(&self, r: usize, c: usize) -> &Tile {
        &self.tiles[r * self.cols + c]
    }

    /// The `rows x cols` sub-mosaic whose top-left tile is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Mosaic {
        let tiles = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (top + r, left + c)))
            .map(|(r, c)| self.tile(r, c).clone())
            .collect();
        Mosaic { rows, cols, tiles }
    }

    /// The same tiles in a shuffled order that differs from the original.
    pub fn shuffled(&self, rng: &mut impl Rng) -> Mosaic {
        let mut order: Vec<usize> = (0..self.tiles.len()).collect();
        if order.len() > 1 {
            while order.iter().enumerate().all(|(i, &o)| i == o) {
                order.shuffle(rng);
            }
        }
        Mosaic {
            rows: self.rows,
            cols: self.cols,
            tiles: order.into_iter().map(|i| self.tiles[i].clone()).collect(),
        }
    }

    pub fn render(&self) -> Image {
        Image::from_fn(self.cols * TILE_PX, self.rows * TILE_PX, |x, y| {
            self.tile(y / TILE_PX, x / TILE_PX).get(x % TILE_PX, y % TILE_PX)
        })
    }
}

/// Random 64x64 scenes, one per seed draw.
pub fn random_scenes(seed: u64, count: usize) -> Vec<Image> {
    let mut rng = rng(seed);
    (0..count).map(|_| Mosaic::random(&mut rng, 4, 4).render()).collect()
}

/// References, queries and truth for a translated-crop retrieval benchmark.
///
/// Scene `i` contributes reference `i` (the top-left 4x4 tiles of a 5x5
/// mosaic) and query `i` (a 4x4 window shifted by one tile). Every scene also
/// adds a distractor reference at index `scenes + i` built by shuffling tiles:
/// for engineered scenes it shuffles the query's own tiles, so its global
/// descriptor matches the query almost exactly while its layout does not;
/// otherwise it shuffles the reference's tiles.
#[derive(Debug, Clone)]
pub struct CropShiftDataset {
    pub references: Vec<Image>,
    pub queries: Vec<Image>,
    /// The correct reference of each query.
    pub truth: Vec<usize>,
    /// Whether scene `i` has a distractor built from the query's tiles.
    pub engineered: Vec<bool>,
}

pub fn crop_shift_dataset(seed: u64, scenes: usize) -> CropShiftDataset {
    let mut rng = rng(seed);
    let shifts = [(0, 1), (1, 0), (1, 1)];
    let mut refs = Vec::with_capacity(scenes);
    let mut distractors = Vec::with_capacity(scenes);
    let mut queries = Vec::with_capacity(scenes);
    let mut engineered = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let canvas = Mosaic::random(&mut rng, 5, 5);
        let (dy, dx) = shifts[i % shifts.len()];
        let reference = canvas.window(0, 0, 4, 4);
        let query = canvas.window(dy, dx, 4, 4);
        let tricky = i % 2 == 0;
        let distractor = if tricky { query.shuffled(&mut rng) } else { reference.shuffled(&mut rng) };
        refs.push(reference.render());
        queries.push(query.render());
        distractors.push(distractor.render());
        engineered.push(tricky);
    }
    refs.extend(distractors);
    CropShiftDataset {
        references: refs,
        queries,
        truth: (0..scenes).collect(),
        engineered,
    }
}

/// Events whose per-pixel density follows each image's intensity.
///
/// Image `i` drives the segment `[i * segment_us, (i + 1) * segment_us)`,
/// shifted by `t0`, with `events_per_segment` events at uniform random times.
pub fn events_from_images(
    images: &[Image],
    t0: u64,
    segment_us: u64,
    events_per_segment: usize,
    rng: &mut impl Rng,
) -> EventStream {
    let (w, h) = (images[0].width(), images[0].height());
    let mut events = Vec::with_capacity(images.len() * events_per_segment);
    for (i, img) in images.iter().enumerate() {
        let mut cdf = Vec::with_capacity(w * h);
        let mut acc = 0.0;
        for &v in img.pixels() {
            acc += v + 1e-3;
            cdf.push(acc);
        }
        let start = t0 + i as u64 * segment_us;
        let mut seg: Vec<Event> = (0..events_per_segment)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let px = cdf.partition_point(|&c| c <= u).min(w * h - 1);
                Event {
                    t: start + rng.random_range(0..segment_us),
                    x: (px % w) as u32,
                    y: (px / w) as u32,
                    p: if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
                }
            })
            .collect();
        seg.sort_by_key(|e| e.t);
        events.extend(seg);
    }
    EventStream::new(w, h, events).expect("generated events are ordered and in bounds")
}

/// Uniformly random events with sorted timestamps over `[t0, t0 + duration)`.
pub fn random_event_stream(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    count: usize,
    t0: u64,
    duration: u64,
) -> EventStream {
    let mut times: Vec<u64> = (0..count).map(|_| t0 + rng.random_range(0..duration.max(1))).collect();
    times.sort_unstable();
    let events = times
        .into_iter()
        .map(|t| Event {
            t,
            x: rng.random_range(0..width as u32),
            y: rng.random_range(0..height as u32),
            p: if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
        })
        .collect();
    EventStream::new(width, height, events).expect("generated events are ordered and in bounds")
}

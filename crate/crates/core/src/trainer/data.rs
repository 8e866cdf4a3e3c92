use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::dataset::{DatasetSplit, Image, Slot, SpeedTable, SynthWorld};
use crate::geo::{self, GeoPoint, Pixel, PixelFrame, RoadSegment, TileIndex};
use crate::losses::Targets;
use crate::model::ContextInput;
use crate::raster::{self, OrientationLabels, RoadMask, SegmentFootprint, SpeedSupervision};
use crate::{Error, Result};

/// Everything time-independent about one tile, rasterized once.
#[derive(Debug, Clone, PartialEq)]
pub struct TileData {
    pub tile: TileIndex,
    pub center: GeoPoint,
    pub image: Image,
    pub mask: RoadMask,
    pub labels: OrientationLabels,
    pub footprints: Vec<SegmentFootprint>,
    /// Slots at which at least one footprint has a table value.
    pub slots: Vec<Slot>,
}

impl TileData {
    pub fn size(&self) -> usize {
        self.mask.size
    }

    pub fn supervision(&self, table: &SpeedTable, slot: Slot) -> SpeedSupervision {
        raster::supervise(&self.footprints, table, slot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tiles: BTreeMap<TileIndex, TileData>,
    pub table: SpeedTable,
    pub split: DatasetSplit,
}

fn touches(seg: &RoadSegment, frame: &PixelFrame, margin_m: f64) -> bool {
    let pad_lat = margin_m / 111_000.0;
    let pad_lon = pad_lat / frame.center().lat().to_radians().cos();
    let lat_lo = seg
        .points
        .iter()
        .map(GeoPoint::lat)
        .fold(f64::INFINITY, f64::min);
    let lat_hi = seg
        .points
        .iter()
        .map(GeoPoint::lat)
        .fold(f64::NEG_INFINITY, f64::max);
    let lon_lo = seg
        .points
        .iter()
        .map(GeoPoint::lon)
        .fold(f64::INFINITY, f64::min);
    let lon_hi = seg
        .points
        .iter()
        .map(GeoPoint::lon)
        .fold(f64::NEG_INFINITY, f64::max);
    lat_lo <= frame.north + pad_lat
        && lat_hi >= frame.south - pad_lat
        && lon_lo <= frame.east + pad_lon
        && lon_hi >= frame.west - pad_lon
}

impl TileData {
    pub fn build(
        tile: TileIndex,
        image: Image,
        segments: &[RoadSegment],
        table: &SpeedTable,
        k_bins: usize,
    ) -> Result<Self> {
        if image.height != image.width {
            return Err(Error::shape(format!("tile {tile} image is not square")));
        }
        let frame = geo::tile_pixel_frame(tile, image.height as u32)?;
        let local: Vec<RoadSegment> = segments
            .iter()
            .filter(|s| touches(s, &frame, 3.0 * raster::SAMPLE_LATERAL_M))
            .cloned()
            .collect();
        let mask = raster::road_mask(&frame, &local, raster::ROAD_HALF_WIDTH_M)?;
        let labels = raster::orientation_labels(&frame, &local, k_bins)?;
        let footprints = raster::footprints(&frame, &local)?;
        let mut slots = BTreeSet::new();
        for f in &footprints {
            slots.extend(table.segment_slots(&f.segment_id).map(|(s, _)| s));
        }
        Ok(Self {
            tile,
            center: frame.center(),
            image,
            mask,
            labels,
            footprints,
            slots: slots.into_iter().collect(),
        })
    }
}

impl Dataset {
    pub fn assemble(
        segments: &[RoadSegment],
        images: BTreeMap<TileIndex, Image>,
        table: SpeedTable,
        split: DatasetSplit,
        k_bins: usize,
    ) -> Result<Self> {
        let mut tiles = BTreeMap::new();
        for t in split.train.iter().chain(&split.val).chain(&split.test) {
            if !images.contains_key(t) {
                return Err(Error::MissingArtifact(
                    format!("tiles/{}.png", t.to_string().replace('/', "_")).into(),
                ));
            }
        }
        for (tile, image) in images {
            tiles.insert(
                tile,
                TileData::build(tile, image, segments, &table, k_bins)?,
            );
        }
        Ok(Self {
            tiles,
            table,
            split,
        })
    }

    /// Renders every tile of a synthetic world.
    pub fn from_world(world: &SynthWorld, split: DatasetSplit, k_bins: usize) -> Result<Self> {
        let mut images = BTreeMap::new();
        for t in &world.tiles {
            images.insert(
                *t,
                crate::dataset::render_image(world, *t, world.config.tile_px)?,
            );
        }
        Self::assemble(&world.segments, images, world.speed_table(), split, k_bins)
    }

    pub fn tile(&self, t: &TileIndex) -> Result<&TileData> {
        self.tiles
            .get(t)
            .ok_or_else(|| Error::BadReference(format!("tile {t} is not in the dataset")))
    }

    /// Tile centers of the training split.
    pub fn train_centers(&self) -> Result<Vec<GeoPoint>> {
        self.split
            .train
            .iter()
            .map(|t| self.tile(t).map(|d| d.center))
            .collect()
    }
}

/// Uniform draw from the supervised slots of a tile.
pub fn sample_slot<R: Rng>(rng: &mut R, slots: &[Slot]) -> Option<Slot> {
    if slots.is_empty() {
        None
    } else {
        Some(slots[rng.random_range(0..slots.len())])
    }
}

/// One training example cut from a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Vec<f64>,
    pub mask: RoadMask,
    pub labels: OrientationLabels,
    pub speeds: SpeedSupervision,
    pub context: ContextInput,
}

/// Crops a size×size window at (r0, c0) and rasterizes the speed targets of `slot`.
pub fn crop_example(
    tile: &TileData,
    table: &SpeedTable,
    slot: Slot,
    r0: usize,
    c0: usize,
    size: usize,
) -> Result<Example> {
    let full = tile.size();
    if r0 + size > full || c0 + size > full {
        return Err(Error::shape(format!(
            "crop {size} at ({r0}, {c0}) exceeds tile size {full}"
        )));
    }
    let inside = |p: &Pixel| {
        let (r, c) = (p.row as usize, p.col as usize);
        (r >= r0 && r < r0 + size && c >= c0 && c < c0 + size)
            .then(|| Pixel::new((r - r0) as u32, (c - c0) as u32))
    };
    let img = &tile.image;
    let mut image = Vec::with_capacity(img.channels * size * size);
    for ch in 0..img.channels {
        for r in r0..r0 + size {
            let row = (ch * img.height + r) * img.width;
            image.extend_from_slice(&img.data[row + c0..row + c0 + size]);
        }
    }
    let mut mask = RoadMask::empty(size);
    for r in 0..size {
        mask.data[r * size..(r + 1) * size]
            .copy_from_slice(&tile.mask.data[(r + r0) * full + c0..(r + r0) * full + c0 + size]);
    }
    let labels = tile
        .labels
        .iter()
        .filter_map(|l| {
            inside(&l.pixel).map(|pixel| raster::OrientationLabel { pixel, bin: l.bin })
        })
        .collect();
    let mut speeds = tile.supervision(table, slot);
    if size != full {
        for e in &mut speeds.entries {
            let (px, th): (Vec<Pixel>, Vec<f64>) = e
                .pixels
                .iter()
                .zip(&e.thetas)
                .filter_map(|(p, t)| inside(p).map(|q| (q, *t)))
                .unzip();
            e.pixels = px;
            e.thetas = th;
        }
        speeds.entries.retain(|e| !e.pixels.is_empty());
    }
    Ok(Example {
        image,
        mask,
        labels,
        speeds,
        context: ContextInput {
            point: tile.center,
            slot,
        },
    })
}

/// Network inputs and targets for a list of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub contexts: Vec<ContextInput>,
    pub targets: Targets,
}

impl Batch {
    pub fn from_examples(examples: Vec<Example>, channels: usize) -> Result<Self> {
        let size = examples
            .first()
            .ok_or_else(|| Error::shape("empty batch"))?
            .mask
            .size;
        let n = examples.len();
        let mut data = Vec::with_capacity(n * channels * size * size);
        let mut targets = Targets::default();
        let mut contexts = Vec::with_capacity(n);
        for e in examples {
            if e.mask.size != size {
                return Err(Error::shape("examples in a batch must share a size"));
            }
            data.extend(e.image);
            targets.masks.push(e.mask);
            targets.labels.push(e.labels);
            targets.speeds.push(e.speeds);
            contexts.push(e.context);
        }
        Ok(Self {
            images: Tensor::new(&[n, channels, size, size], data)?,
            contexts,
            targets,
        })
    }
}

//! Splitting an edited scene into background and instance-level objects, and
//! putting generated parts back together.

use std::collections::{BTreeMap, HashMap, VecDeque};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};
use crate::nn::bilinear_taps;
use crate::raster::{BinaryGrid, Grid, RgbImage};

/// Default fraction of visible instance pixels below which an object is
/// generated from scratch instead of inpainted.
pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.05;

/// Margin added around an instance bounding box before squaring it.
pub const CROP_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub labels: Grid<u8>,
    pub num_classes: usize,
    pub foreground: Vec<usize>,
}

impl SegmentationMap {
    pub fn new(labels: Grid<u8>, num_classes: usize, mut foreground: Vec<usize>) -> Result<Self> {
        foreground.sort_unstable();
        foreground.dedup();
        if let Some(&c) = foreground.iter().find(|&&c| c >= num_classes) {
            return Err(invalid!("foreground class {c} outside [0, {num_classes})"));
        }
        if let Some(&l) = labels.data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(invalid!("label {l} outside [0, {num_classes})"));
        }
        Ok(Self {
            labels,
            num_classes,
            foreground,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn is_foreground(&self, class: usize) -> bool {
        self.foreground.binary_search(&class).is_ok()
    }

    /// Index of `class` within the foreground set (the K-channel axis).
    pub fn foreground_index(&self, class: usize) -> Option<usize> {
        self.foreground.binary_search(&class).ok()
    }

    pub fn background_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| !self.is_foreground(c)).collect()
    }

    /// `[L, H, W]` one-hot tensor.
    pub fn one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let mut v = vec![0f32; self.num_classes * h * w];
        for (i, &l) in self.labels.data.iter().enumerate() {
            v[l as usize * h * w + i] = 1.0;
        }
        Ok(Tensor::from_vec(v, (self.num_classes, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Binary edited-region mask: 1 marks pixels to regenerate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask(pub BinaryGrid);

impl EditMask {
    pub fn new(grid: BinaryGrid) -> Result<Self> {
        if grid.data.iter().any(|&v| v > 1) {
            return Err(invalid!("edit mask values must be 0 or 1"));
        }
        Ok(Self(grid))
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self(BinaryGrid::new(height, width))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn edited(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObjectMode {
    Inpaint,
    Generate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub class_id: usize,
    pub instance_id: u32,
    pub mask: BinaryGrid,
    pub bbox: BBox,
    pub visible_fraction: f64,
    pub mode: ObjectMode,
}

impl InstanceRecord {
    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

/// Square window in scene coordinates that a crop was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub out_size: usize,
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub record: InstanceRecord,
    /// Erased scene content inside the placement window, resampled.
    pub crop_image: RgbImage,
    /// Instance mask inside the window.
    pub crop_mask: BinaryGrid,
    /// Edited pixels of the instance inside the window.
    pub crop_hole: BinaryGrid,
    pub placement: Placement,
}

#[derive(Debug, Clone)]
pub struct SceneDecomposition {
    pub background_input: RgbImage,
    pub background_mask: BinaryGrid,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy)]
pub struct DisassemblyConfig {
    pub visibility_threshold: f64,
    pub crop_size: usize,
}

impl Default for DisassemblyConfig {
    fn default() -> Self {
        Self {
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            crop_size: 128,
        }
    }
}

fn check_same(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// `image * (1 - mask)`, broadcast over channels.
pub fn erase_input(image: &RgbImage, mask: &EditMask) -> Result<RgbImage> {
    check_same(image.dims(), mask.dims(), "erase_input")?;
    let mut out = image.clone();
    for (i, &m) in mask.0.data.iter().enumerate() {
        if m != 0 {
            out.data[i * 3..i * 3 + 3].fill(0.0);
        }
    }
    Ok(out)
}

/// Every foreground instance in the scene as `(class, id, mask)`, ordered by
/// `(class, id)`.
///
/// With an instance map, nonzero ids identify instances; foreground pixels
/// left at id 0 are split into 4-connected components with fresh ids. Without
/// one, all instances come from connected components.
pub fn foreground_instances(
    seg: &SegmentationMap,
    instance_map: Option<&Grid<u16>>,
) -> Result<Vec<(usize, u32, BinaryGrid)>> {
    let (h, w) = seg.dims();
    let mut ids = vec![0u32; h * w];
    let mut class_of: HashMap<u32, usize> = HashMap::new();
    let mut next_id = 1u32;
    if let Some(inst) = instance_map {
        check_same(inst.dims(), seg.dims(), "instance map")?;
        for (i, &id) in inst.data.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let class = seg.labels.data[i] as usize;
            if !seg.is_foreground(class) {
                return Err(invalid!(
                    "instance id {id} covers pixel {i} of background class {class}"
                ));
            }
            match class_of.insert(id as u32, class) {
                Some(prev) if prev != class => {
                    return Err(invalid!("instance id {id} spans classes {prev} and {class}"));
                }
                _ => {}
            }
            ids[i] = id as u32;
        }
        next_id = inst.data.iter().copied().max().unwrap_or(0) as u32 + 1;
    }

    // Label remaining foreground pixels by connected component.
    for start in 0..h * w {
        let class = seg.labels.data[start] as usize;
        if ids[start] != 0 || !seg.is_foreground(class) {
            continue;
        }
        let id = next_id;
        next_id += 1;
        class_of.insert(id, class);
        ids[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if ids[q] == 0 && seg.labels.data[q] as usize == class {
                    ids[q] = id;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }

    let mut masks: BTreeMap<(usize, u32), BinaryGrid> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != 0 {
            masks
                .entry((class_of[&id], id))
                .or_insert_with(|| BinaryGrid::new(h, w))
                .data[i] = 1;
        }
    }
    Ok(masks.into_iter().map(|((c, id), m)| (c, id, m)).collect())
}

pub fn tight_bbox(mask: &BinaryGrid) -> Option<BBox> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) != 0 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0 != usize::MAX).then(|| BBox {
        top: y0,
        left: x0,
        height: y1 - y0 + 1,
        width: x1 - x0 + 1,
    })
}

fn visible_fraction(instance: &BinaryGrid, mask: &EditMask) -> Result<f64> {
    let total = instance.count();
    if total == 0 {
        return Err(invalid!("empty instance mask"));
    }
    let visible = instance
        .data
        .iter()
        .zip(&mask.0.data)
        .filter(|(&i, &m)| i != 0 && m == 0)
        .count();
    Ok(visible as f64 / total as f64)
}

/// `Generate` iff the visible share of the instance is below `threshold`.
pub fn classify_mode(record: &InstanceRecord, mask: &EditMask, threshold: f64) -> Result<ObjectMode> {
    check_same(record.mask.dims(), mask.dims(), "classify_mode")?;
    let v = visible_fraction(&record.mask, mask)?;
    Ok(if v < threshold {
        ObjectMode::Generate
    } else {
        ObjectMode::Inpaint
    })
}

/// Square window around `bbox` with a 10% margin, moved to lie inside the image.
pub fn crop_window(bbox: BBox, height: usize, width: usize, out_size: usize) -> Result<Placement> {
    if bbox.height == 0 || bbox.width == 0 {
        return Err(invalid!("degenerate bounding box {bbox:?}"));
    }
    if out_size == 0 {
        return Err(invalid!("crop size must be positive"));
    }
    let longest = bbox.height.max(bbox.width);
    let side = ((longest as f64 * (1.0 + CROP_MARGIN)).ceil() as usize).min(height.min(width));
    let place = |start: usize, extent: usize, limit: usize| -> usize {
        let start = start as isize + (extent as isize - side as isize).div_euclid(2);
        start.clamp(0, (limit - side) as isize) as usize
    };
    Ok(Placement {
        top: place(bbox.top, bbox.height, height),
        left: place(bbox.left, bbox.width, width),
        side,
        out_size,
    })
}

pub fn crop_object(
    image_erased: &RgbImage,
    record: &InstanceRecord,
    out_size: usize,
) -> Result<(RgbImage, BinaryGrid, Placement)> {
    check_same(image_erased.dims(), record.mask.dims(), "crop_object")?;
    let placement = crop_window(record.bbox, image_erased.height, image_erased.width, out_size)?;
    let window = sub_image(image_erased, &placement);
    let mask_window = sub_grid(&record.mask, &placement);
    Ok((
        resize_image(&window, out_size, out_size),
        resize_nearest(&mask_window, out_size, out_size),
        placement,
    ))
}

fn sub_image(img: &RgbImage, p: &Placement) -> RgbImage {
    let mut out = RgbImage::new(p.side, p.side);
    for y in 0..p.side {
        for x in 0..p.side {
            out.set_pixel(y, x, img.pixel(p.top + y, p.left + x));
        }
    }
    out
}

fn sub_grid(g: &BinaryGrid, p: &Placement) -> BinaryGrid {
    let mut out = BinaryGrid::new(p.side, p.side);
    for y in 0..p.side {
        for x in 0..p.side {
            out.set(y, x, g.get(p.top + y, p.left + x));
        }
    }
    out
}

/// Bilinear resample with half-pixel centers; identity when sizes match.
pub fn resize_image(img: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    if img.dims() == (out_h, out_w) {
        return img.clone();
    }
    let ty = bilinear_taps(img.height, out_h);
    let tx = bilinear_taps(img.width, out_w);
    let mut out = RgbImage::new(out_h, out_w);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let mut px = [0f32; 3];
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                px[ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
            out.set_pixel(oy, ox, px);
        }
    }
    out
}

pub fn resize_nearest<T: Copy + Default>(g: &Grid<T>, out_h: usize, out_w: usize) -> Grid<T> {
    let mut out = Grid::new(out_h, out_w);
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * g.height as f64 / out_h as f64) as usize).min(g.height - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * g.width as f64 / out_w as f64) as usize).min(g.width - 1);
            out.set(oy, ox, g.get(sy, sx));
        }
    }
    out
}

pub fn make_record(
    class_id: usize,
    instance_id: u32,
    mask: BinaryGrid,
    edit: &EditMask,
    threshold: f64,
) -> Result<InstanceRecord> {
    let bbox = tight_bbox(&mask).ok_or_else(|| invalid!("empty instance mask"))?;
    let visible_fraction = visible_fraction(&mask, edit)?;
    let mode = if visible_fraction < threshold {
        ObjectMode::Generate
    } else {
        ObjectMode::Inpaint
    };
    Ok(InstanceRecord {
        class_id,
        instance_id,
        mask,
        bbox,
        visible_fraction,
        mode,
    })
}

pub fn disassemble(
    image_erased: &RgbImage,
    seg: &SegmentationMap,
    mask: &EditMask,
    instance_map: Option<&Grid<u16>>,
    config: &DisassemblyConfig,
) -> Result<SceneDecomposition> {
    check_same(image_erased.dims(), seg.dims(), "disassemble: image vs seg")?;
    check_same(mask.dims(), seg.dims(), "disassemble: mask vs seg")?;
    let (h, w) = seg.dims();

    let mut objects = Vec::new();
    let mut covered = BinaryGrid::new(h, w);
    for (class, id, inst) in foreground_instances(seg, instance_map)? {
        let touches_edit = inst.data.iter().zip(&mask.0.data).any(|(&i, &m)| i != 0 && m != 0);
        if !touches_edit {
            continue;
        }
        for (c, &i) in covered.data.iter_mut().zip(&inst.data) {
            *c |= i;
        }
        let record = make_record(class, id, inst, mask, config.visibility_threshold)?;
        let (crop_image, crop_mask, placement) = crop_object(image_erased, &record, config.crop_size)?;
        let hole_full = BinaryGrid {
            height: h,
            width: w,
            data: record.mask.data.iter().zip(&mask.0.data).map(|(&i, &m)| i & m).collect(),
        };
        let crop_hole = resize_nearest(&sub_grid(&hole_full, &placement), placement.out_size, placement.out_size);
        objects.push(SceneObject {
            record,
            crop_image,
            crop_mask,
            crop_hole,
            placement,
        });
    }

    let mut background_mask = BinaryGrid::new(h, w);
    for i in 0..h * w {
        let edited = mask.0.data[i] != 0;
        let bg_class = !seg.is_foreground(seg.labels.data[i] as usize);
        let keep = if edited { covered.data[i] == 0 } else { bg_class };
        background_mask.data[i] = keep as u8;
    }
    let mut background_input = image_erased.clone();
    for (i, &b) in background_mask.data.iter().enumerate() {
        if b == 0 {
            background_input.data[i * 3..i * 3 + 3].fill(0.0);
        }
    }
    Ok(SceneDecomposition {
        background_input,
        background_mask,
        objects,
    })
}

/// Pastes generated crops over `background`, largest instance first so that
/// smaller ones win where masks overlap. Only instance-mask pixels are written.
pub fn compose(background: &RgbImage, objects: &[(RgbImage, &InstanceRecord, Placement)]) -> Result<RgbImage> {
    let mut out = background.clone();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(objects[i].1.area()));
    for i in order {
        let (crop, record, p) = &objects[i];
        check_same(record.mask.dims(), background.dims(), "compose: instance mask")?;
        if p.top + p.side > out.height || p.left + p.side > out.width {
            return Err(dim_err!("placement {p:?} leaves the image"));
        }
        let native = resize_image(crop, p.side, p.side);
        for y in 0..p.side {
            for x in 0..p.side {
                let (sy, sx) = (p.top + y, p.left + x);
                if record.mask.get(sy, sx) != 0 {
                    out.set_pixel(sy, sx, native.pixel(y, x));
                }
            }
        }
    }
    Ok(out)
}

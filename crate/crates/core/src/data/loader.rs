//! Folder datasets laid out as `<root>/Imgs/<stem>.{jpg,png}` with masks at
//! `<root>/GT/<stem>.png`.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::{binarize_mask, resize_image, resize_nearest, DatasetSample};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Lazily decodes pairs in sorted stem order.
#[derive(Debug, Clone)]
pub struct DatasetIter {
    pairs: Vec<(String, PathBuf, PathBuf)>,
    next: usize,
    resolution: usize,
}

impl DatasetIter {
    /// Remaining pairs.
    pub fn len(&self) -> usize {
        self.pairs.len() - self.next
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(s, _, _)| s.as_str())
    }
}

impl Iterator for DatasetIter {
    type Item = Result<DatasetSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let (stem, img, gt) = self.pairs.get(self.next)?;
        self.next += 1;
        Some(read_pair(stem, img, gt, self.resolution))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.len(), Some(self.len()))
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Image files under `dir` keyed by stem, sorted. Non-image files are ignored.
pub fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() || !has_image_extension(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Enumerates `root` and checks every image has a mask. Decoding happens
/// on iteration; images are resized bilinearly and masks by nearest
/// neighbour to `resolution × resolution`.
pub fn load_dataset(root: &Path, resolution: usize) -> Result<DatasetIter> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let imgs = root.join("Imgs");
    let gts = root.join("GT");
    for dir in [&imgs, &gts] {
        if !dir.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", dir.display())));
        }
    }
    let mut pairs = Vec::new();
    for (stem, img) in image_files(&imgs)? {
        let gt = gts.join(format!("{stem}.png"));
        if !gt.is_file() {
            return Err(Error::MissingMask(img));
        }
        pairs.push((stem, img, gt));
    }
    if pairs.is_empty() {
        log::warn!("no images found under {}", imgs.display());
    }
    Ok(DatasetIter { pairs, next: 0, resolution })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Decodes an RGB image to `(3, H, W)` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        f32::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0
    }))
}

fn read_pair(stem: &str, img: &Path, gt: &Path, resolution: usize) -> Result<DatasetSample> {
    let image = read_rgb(img)?;
    let mask = open(gt)?.into_luma8();
    let (w, h) = mask.dimensions();
    let mask = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| f32::from(mask.get_pixel(j as u32, i as u32)[0]) / 255.0);
    Ok(DatasetSample {
        id: stem.to_string(),
        image: resize_image(&image, resolution, resolution),
        mask: binarize_mask(&resize_nearest(&mask, resolution, resolution)),
    })
}

/// Writes samples in the folder layout (images as RGB PNG, masks as 0/255).
pub fn write_dataset(samples: &[DatasetSample], root: &Path) -> Result<()> {
    let imgs = root.join("Imgs");
    let gts = root.join("GT");
    std::fs::create_dir_all(&imgs)?;
    std::fs::create_dir_all(&gts)?;
    for s in samples {
        let (_, h, w) = s.image.dim();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| (s.image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if s.mask[[y as usize, x as usize]] > 0.0 { 255 } else { 0 }]));
        let img_path = imgs.join(format!("{}.png", s.id));
        let gt_path = gts.join(format!("{}.png", s.id));
        rgb.save(&img_path).map_err(|source| Error::Image { path: img_path, source })?;
        mask.save(&gt_path).map_err(|source| Error::Image { path: gt_path, source })?;
    }
    Ok(())
}

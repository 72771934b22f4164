use std::fs;
use std::path::Path;

use drdc::synthdata::{load_directory_dataset, Split};
use drdc::Error;
use image::{GrayImage, Luma, Rgb, RgbImage};

fn write_rgb(path: &Path, v: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(40, 40, Rgb([v, v, v])).save(path).unwrap();
}

fn write_mask(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    // A one-pixel-wide vertical line.
    GrayImage::from_fn(40, 40, |x, _| Luma([if x == 21 { 255 } else { 0 }])).save(path).unwrap();
}

fn tree(root: &Path, with_mask: bool) {
    for cat in ["bottle", "cable"] {
        let c = root.join(cat);
        write_rgb(&c.join("train/good/000.png"), 100);
        write_rgb(&c.join("train/good/001.png"), 110);
        write_rgb(&c.join("test/good/000.png"), 105);
        write_rgb(&c.join("test/crack/000.png"), 200);
        if with_mask || cat == "bottle" {
            write_mask(&c.join("ground_truth/crack/000_mask.png"));
        }
    }
}

#[test]
fn loads_and_resizes_an_mvtec_tree() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), true);
    let m = load_directory_dataset(dir.path(), 16, 16).unwrap();
    assert_eq!(m.categories, vec!["bottle", "cable"]);
    assert_eq!(m.image_shape, (16, 16, 3));
    assert_eq!(m.records.iter().filter(|r| r.split == Split::Train).count(), 4);
    let bad: Vec<_> = m.test().filter(|r| r.is_anomalous).collect();
    assert_eq!(bad.len(), 2);
    for r in bad {
        assert_eq!(r.defect.as_deref(), Some("crack"));
        assert_eq!(r.gt_mask.dim(), (16, 16));
        // Thin masks survive nearest-neighbour downsizing and stay binary.
        assert!(r.gt_mask.iter().any(|&v| v == 1));
        assert!(r.gt_mask.iter().all(|&v| v <= 1));
    }
}

#[test]
fn missing_mask_is_named() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), false);
    match load_directory_dataset(dir.path(), 16, 16) {
        Err(Error::Dataset(msg)) => assert!(msg.contains("cable/ground_truth/crack/000_mask.png"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

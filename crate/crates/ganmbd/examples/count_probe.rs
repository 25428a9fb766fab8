//! Scratch diagnostic: component counts on translated images vs annotations.

use ganmbd::data::{detect_centroids, load_image_png, MaskRule};

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let ann_path = std::env::args().nth(2).unwrap();
    let ann: Vec<(String, usize)> = std::fs::read_to_string(&ann_path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["path"].as_str().unwrap().to_string(),
                v["centers"].as_array().unwrap().len(),
            )
        })
        .collect();
    for min_area in [6usize, 12, 20, 30, 45] {
        let rule = MaskRule { min_area, ..MaskRule::default() };
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut extra = 0usize;
        let mut missing = 0usize;
        for (path, count) in &ann {
            let stem = std::path::Path::new(path).file_stem().unwrap().to_str().unwrap();
            let class = std::path::Path::new(path)
                .parent()
                .unwrap()
                .file_name()
                .unwrap()
                .to_str()
                .unwrap();
            let idx: usize = stem.parse().unwrap();
            let base: usize = match class {
                "disc" => 0,
                "star" => 250,
                _ => 500,
            };
            let f = format!("{dir}/{}_{:04}_to_star.png", class, base + idx);
            let img = match load_image_png(std::path::Path::new(&f), 64) {
                Ok(t) => t,
                Err(_) => continue,
            };
            let got = detect_centroids(&img, &rule).unwrap().len();
            total += 1;
            if got == *count {
                hits += 1;
            } else if got > *count {
                extra += 1;
            } else {
                missing += 1;
            }
        }
        println!(
            "min_area {min_area:>2}: match {:.3} ({hits}/{total}), over-count {extra}, under-count {missing}",
            hits as f64 / total as f64
        );
    }
    // joint histogram annotated x detected at default rule
    let rule = MaskRule::default();
    let mut joint = std::collections::BTreeMap::new();
    for (path, count) in &ann {
        let stem = std::path::Path::new(path).file_stem().unwrap().to_str().unwrap();
        let class = std::path::Path::new(path)
            .parent()
            .unwrap()
            .file_name()
            .unwrap()
            .to_str()
            .unwrap();
        let idx: usize = stem.parse().unwrap();
        let base: usize = match class {
            "disc" => 0,
            "star" => 250,
            _ => 500,
        };
        let f = format!("{dir}/{}_{:04}_to_star.png", class, base + idx);
        if let Ok(img) = load_image_png(std::path::Path::new(&f), 64) {
            let got = detect_centroids(&img, &rule).unwrap().len();
            *joint.entry((*count, got.min(6))).or_insert(0usize) += 1;
        }
    }
    for ((want, got), n) in joint {
        println!("annotated {want} -> detected {got}: {n}");
    }
}

use std::fs;
use std::path::Path;

use epmvg_core::data::scene::{quantize, BACKGROUND, GRID};
use epmvg_core::data::vocab::{COLORS, SHAPES};
use epmvg_core::data::{generate_dataset, load_dataset, save_dataset, GrammarConfig, SceneObject, SceneSpec, Split, MANIFEST_FILE};

/// Independent reading of an expression: a predicate over the scene's
/// objects, built from the words alone.
fn parse(text: &str) -> Box<dyn Fn(&SceneSpec, usize) -> bool> {
    let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    assert_eq!(words[0], "the", "{text}");
    let shape_of = |w: &str| SHAPES.iter().position(|s| *s == w);
    let color_of = |w: &str| COLORS.iter().position(|c| *c == w);
    let shape_name = |o: &SceneObject| o.shape.word().to_string();

    if let Some(p) = words.iter().position(|w| w == "in") {
        let color = color_of(&words[1]).expect("color");
        let shape = words[2].clone();
        let top = words[p + 2] == "top";
        let left = words[p + 3] == "left";
        return Box::new(move |s: &SceneSpec, i: usize| {
            let o = &s.objects[i];
            o.color == color
                && shape_name(o) == shape
                && (o.row < GRID / 2) == top
                && (o.col < GRID / 2) == left
        });
    }
    if let Some(p) = words.iter().position(|w| w == "left" || w == "right") {
        let shape = words[1].clone();
        let anchor = words[p + 3].clone();
        assert_eq!((words[p + 1].as_str(), words[p + 2].as_str()), ("of", "the"), "{text}");
        let left = words[p] == "left";
        return Box::new(move |s: &SceneSpec, i: usize| {
            let o = &s.objects[i];
            shape_name(o) == shape
                && s.objects.iter().enumerate().any(|(j, a)| {
                    j != i && shape_name(a) == anchor && if left { o.col < a.col } else { o.col > a.col }
                })
        });
    }
    let shape = words.last().unwrap().clone();
    assert!(shape_of(&shape).is_some(), "{text}");
    let mut size = None;
    let mut color = None;
    for w in &words[1..words.len() - 1] {
        if w == "small" || w == "large" {
            size = Some(w.clone());
        } else {
            color = Some(color_of(w).unwrap_or_else(|| panic!("unexpected word {w} in {text}")));
        }
    }
    Box::new(move |s: &SceneSpec, i: usize| {
        let o = &s.objects[i];
        shape_name(o) == shape
            && size.as_deref().is_none_or(|z| o.size.word() == z)
            && color.is_none_or(|c| o.color == c)
    })
}

#[test]
fn every_expression_picks_out_exactly_its_target() {
    let ds = generate_dataset(600, 21, &GrammarConfig::default()).unwrap();
    for s in &ds.samples {
        let scene = s.scene.as_ref().unwrap();
        let pred = parse(&s.expression);
        let hits: Vec<usize> = (0..scene.objects.len()).filter(|&i| pred(scene, i)).collect();
        assert_eq!(hits, [scene.target], "sample {}: {}", s.id, s.expression);
    }
}

#[test]
fn ground_truth_box_contains_rendered_extent_center() {
    let cfg = GrammarConfig::default();
    let ds = generate_dataset(300, 4, &cfg).unwrap();
    let n = cfg.image_size;
    let cell = n / GRID;
    for s in &ds.samples {
        let t = s.scene.as_ref().unwrap().target_object();
        let img = s.image.data();
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for py in t.row * cell..(t.row + 1) * cell {
            for px in t.col * cell..(t.col + 1) * cell {
                if (0..3).any(|c| img[(c * n + py) * n + px] != quantize(BACKGROUND)) {
                    x0 = x0.min(px);
                    x1 = x1.max(px);
                    y0 = y0.min(py);
                    y1 = y1.max(py);
                }
            }
        }
        assert!(x0 <= x1, "sample {} rendered nothing", s.id);
        let cx = (x0 + x1 + 1) as f64 / 2.0 / n as f64;
        let cy = (y0 + y1 + 1) as f64 / 2.0 / n as f64;
        let [bx1, by1, bx2, by2] = s.gt_box.corners();
        assert!(bx1 <= cx && cx <= bx2 && by1 <= cy && cy <= by2, "sample {}", s.id);
    }
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    let cfg = GrammarConfig::default();
    let a = generate_dataset(50, 9, &cfg).unwrap();
    let b = generate_dataset(50, 9, &cfg).unwrap();
    assert_eq!(a.manifest(), b.manifest());
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert!(x.image.bit_eq(&y.image));
        assert_eq!(x.caption, y.caption);
    }
    assert_ne!(a.manifest(), generate_dataset(50, 10, &cfg).unwrap().manifest());
}

fn dir_size(dir: &Path) -> u64 {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let m = e.metadata().unwrap();
            if m.is_dir() {
                dir_size(&e.path())
            } else {
                m.len()
            }
        })
        .sum()
}

#[test]
fn save_load_save_is_byte_identical_and_compact() {
    let cfg = GrammarConfig::default();
    let ds = generate_dataset(2000, 1, &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    save_dataset(&d1, &ds).unwrap();
    let back = load_dataset(&d1).unwrap();
    save_dataset(&d2, &back).unwrap();
    assert_eq!(
        fs::read(d1.join(MANIFEST_FILE)).unwrap(),
        fs::read(d2.join(MANIFEST_FILE)).unwrap()
    );
    for (x, y) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(x.gt_box, y.gt_box);
        assert_eq!(x.split, y.split);
        assert!(x.image.bit_eq(&y.image));
    }
    assert!(!back.split(Split::Val).is_empty());
    let bytes = dir_size(&d1);
    assert!(bytes < 100 * 1024 * 1024, "{bytes} bytes");
}

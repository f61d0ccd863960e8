// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use csae_core::data::generate_dataset;
use csae_workbench::dataset::{
    export_annotations, export_images, gen_data, load_dataset, read_annotations, read_images_for, AnnotationFile,
};
use csae_workbench::WorkbenchError;

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_data(&a, 7, 40).unwrap();
    gen_data(&b, 7, 40).unwrap();
    let first = dir_bytes(&a);
    assert_eq!(first, dir_bytes(&b));
    assert_eq!(first.keys().cloned().collect::<Vec<_>>(), ["images.dump", "manifest.json", "records.json"]);

    // regenerating in place replaces the directory with the same bytes
    gen_data(&a, 7, 40).unwrap();
    assert_eq!(first, dir_bytes(&a));
    gen_data(&b, 8, 40).unwrap();
    assert_ne!(first, dir_bytes(&b));
    // no temporary siblings are left behind
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 2);
}

#[test]
fn stored_dataset_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let data = gen_data(&dir, 11, 30).unwrap();
    assert_eq!(data, generate_dataset(11, 30));
    assert_eq!(load_dataset(&dir).unwrap(), data);
}

#[test]
fn annotation_export_import_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(5, 25);
    let ann = tmp.path().join("ann.json");
    let img = tmp.path().join("img.dump");
    export_annotations(&data, &ann).unwrap();
    export_images(&data, &img).unwrap();

    let file = read_annotations(&ann).unwrap();
    assert_eq!(file.vocabulary, data.vocabulary);
    assert_eq!(file.records.len(), 25);
    assert_eq!(file.records[0].masks.dims, vec![9, 1024]);
    let text: serde_json::Value = serde_json::from_slice(&std::fs::read(&ann).unwrap()).unwrap();
    assert!(text["records"][0]["S"].is_array());
    assert!(text["records"][0]["M"]["dims"].is_array());

    let images = read_images_for(&file, &img).unwrap();
    let imported = file.into_dataset(images).unwrap();
    for (a, b) in imported.samples.iter().zip(&data.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.scores, b.scores);
        assert!(a.image.bit_eq(&b.image));
        assert!(a.pixel_masks.bit_eq(&b.pixel_masks));
        assert_eq!(a.foreground, b.foreground);
        assert_eq!(a.annotation(8).unwrap(), b.annotation(8).unwrap());
        assert!(a.scene.is_none());
    }

    // imported datasets persist their masks explicitly
    let dir = tmp.path().join("imported");
    csae_workbench::dataset::save_dataset(&dir, &imported, &csae_workbench::provenance::Provenance::new("t", 0, &())).unwrap();
    assert!(dir.join("masks.dump").exists());
    assert_eq!(load_dataset(&dir).unwrap(), imported);
}

fn annotation_error(file: &AnnotationFile) -> (u64, String) {
    match file.validate() {
        Err(WorkbenchError::Annotation { id, detail }) => (id, detail),
        other => panic!("expected an annotation error, got {other:?}"),
    }
}

#[test]
fn annotation_validation() {
    let data = generate_dataset(5, 3);
    let good = AnnotationFile::from_dataset(&data);
    good.validate().unwrap();

    let mut f = good.clone();
    f.records[1].scores.pop();
    assert_eq!(annotation_error(&f).0, 1);

    let mut f = good.clone();
    f.records[2].scores[0] = 1.5;
    assert!(annotation_error(&f).1.contains("outside"));

    let mut f = good.clone();
    f.records[0].masks.values[17] = -0.25;
    assert!(annotation_error(&f).1.contains("outside"));

    let mut f = good.clone();
    f.records[0].masks.dims = vec![9, 256];
    assert!(annotation_error(&f).1.contains("dims"));

    let mut f = good.clone();
    f.records[2].id = 0;
    assert!(annotation_error(&f).1.contains("duplicate"));

    let mut f = good.clone();
    f.records[1].label = 3;
    assert!(annotation_error(&f).1.contains("label"));
}

#[test]
fn absent_concepts_have_their_masks_suppressed_on_import() {
    let data = generate_dataset(5, 2);
    let mut file = AnnotationFile::from_dataset(&data);
    let absent = file.records[0].scores.iter().position(|&s| s == 0.0).unwrap();
    file.records[0].masks.values[absent * 1024..(absent + 1) * 1024].fill(1.0);
    let images = data.samples.iter().map(|s| s.image.clone()).collect();
    let back = file.into_dataset(images).unwrap();
    assert!(back.samples[0].pixel_masks.data()[absent * 1024..(absent + 1) * 1024].iter().all(|&v| v == 0.0));
}

#[test]
fn missing_image_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(5, 4);
    let img = tmp.path().join("img.dump");
    let mut fewer = data.clone();
    fewer.samples.truncate(3);
    export_images(&fewer, &img).unwrap();
    let file = AnnotationFile::from_dataset(&data);
    match read_images_for(&file, &img) {
        Err(WorkbenchError::MissingRecord(name)) => assert_eq!(name, "image/3"),
        other => panic!("{other:?}"),
    }
}

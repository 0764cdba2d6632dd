mod common;

use docsynth::docgen::{generate_document, GenConfig, PATCH_SIZE};
use docsynth::inference::{tile, tile_offsets};
use docsynth::{GenSeed, LabelImage};

#[test]
fn zero_overlap_tiles_restitch_the_document_label() {
    for (seed, h, w) in [(1u64, 512, 512), (2, 700, 530), (3, 256, 900)] {
        let (doc, label) = generate_document(GenSeed(seed), &GenConfig::default(), h, w).unwrap();
        let ys = tile_offsets(h, PATCH_SIZE, 0.0).unwrap();
        let xs = tile_offsets(w, PATCH_SIZE, 0.0).unwrap();
        assert_eq!(ys, common::grid_offsets(h, PATCH_SIZE, PATCH_SIZE));
        assert_eq!(xs, common::grid_offsets(w, PATCH_SIZE, PATCH_SIZE));
        let mut stitched = vec![u8::MAX; h * w];
        for &y0 in &ys {
            for &x0 in &xs {
                let crop = label.crop(x0, y0, PATCH_SIZE, PATCH_SIZE).unwrap();
                for y in 0..PATCH_SIZE {
                    for x in 0..PATCH_SIZE {
                        stitched[(y0 + y) * w + x0 + x] = crop.get(x, y);
                    }
                }
            }
        }
        assert_eq!(LabelImage::new(h, w, stitched).unwrap(), label);

        // The image tiler uses the same origins.
        let gray = docsynth::image::to_grayscale(&doc);
        let t = tile(&gray, PATCH_SIZE, 0.0).unwrap();
        assert_eq!(t.tiles.len(), ys.len() * xs.len());
    }
}

#[test]
fn documents_without_handwriting_only_hold_printed_text() {
    let config = GenConfig { handwriting_probability: 0.0, ..GenConfig::default() };
    let (_, label) = generate_document(GenSeed(4), &config, 1024, 768).unwrap();
    let hist = label.histogram();
    assert_eq!(hist[2], 0);
    assert!(hist[1] > 0);
}

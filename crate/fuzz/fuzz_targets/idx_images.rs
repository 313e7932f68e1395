#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((rows, cols, images)) = anesi::tasks::parse_idx_images(data) {
        // every accepted file must be internally consistent
        for img in &images {
            assert_eq!(img.len(), rows * cols);
        }
    }
});

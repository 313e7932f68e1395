#![no_main]

use anesi::ndauto::checkpoint::{from_bytes, to_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = from_bytes(data) {
        // anything the reader accepts must survive a write/read round trip
        let named: Vec<(&str, &anesi::ndauto::Tensor)> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let again = from_bytes(&to_bytes(named)).expect("round trip");
        assert_eq!(entries.len(), again.len());
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&again) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }
});

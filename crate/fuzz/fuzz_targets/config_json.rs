#![no_main]

use anesi_cli::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config(text) {
        // accepted configs must reserialize and reparse to the same value
        let again = parse_config(&serde_json::to_string(&cfg).expect("serializable"))
            .expect("round trip");
        assert_eq!(cfg, again);
    }
});

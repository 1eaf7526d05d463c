#![no_main]

use libfuzzer_sys::fuzz_target;
use rainbow_sim::config::SimConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = SimConfig::from_toml_str(s);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use rainbow_sim::workload::parse_line;

// one line per call keeps the parser honest about comments, hex addresses
// and trailing junk; errors are fine, panics are not
fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        for (i, line) in s.lines().enumerate() {
            let _ = parse_line(line, i + 1);
        }
    }
});

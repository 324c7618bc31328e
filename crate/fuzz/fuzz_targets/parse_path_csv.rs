#![no_main]

use ere_core::csvio::{path_to_csv, read_path_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|src: &str| {
    if let Ok((name, path)) = read_path_csv(src) {
        let text = path_to_csv(&name, &path);
        let (_, back) = read_path_csv(&text).expect("written paths parse");
        assert_eq!(back.values, path.values);
    }
});

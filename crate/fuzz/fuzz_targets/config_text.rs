//! Accepted config text must survive the canonical echo unchanged.

#![no_main]

use dep::config::ConfigMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = ConfigMap::parse(text) {
        let echo = map.to_text();
        let again = ConfigMap::parse(&echo).expect("canonical text reparses");
        assert_eq!(map, again);
        assert_eq!(echo, again.to_text());
    }
});

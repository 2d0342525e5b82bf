//! An accepted prompt reparses from its own surface form to the same ids.

#![no_main]

use std::sync::OnceLock;

use dep::core::Prompt;
use dep::mockvlm::{LanguageParams, MockLanguage};
use libfuzzer_sys::fuzz_target;

fn language() -> &'static MockLanguage {
    static LANG: OnceLock<MockLanguage> = OnceLock::new();
    LANG.get_or_init(|| MockLanguage::generate(LanguageParams::default()).expect("default language"))
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let vocab = language().vocab();
    if let Ok(prompt) = Prompt::parse(vocab, text) {
        let again = Prompt::parse(vocab, prompt.surface()).expect("surface form reparses");
        assert_eq!(prompt.ids(), again.ids());
    }
});

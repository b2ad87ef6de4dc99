#![no_main]
use libfuzzer_sys::fuzz_target;
use gse_core::harness::io::{clue_string, parse_clue_string};
use gse_core::TokenGrid;

fuzz_target!(|data: &[u8]| {
    let Some((&first, rest)) = data.split_first() else {
        return;
    };
    let Ok(s) = std::str::from_utf8(rest) else {
        return;
    };
    let classes = u32::from(first % 64) + 1;
    if let Ok(grid) = TokenGrid::parse_token_string(s, classes) {
        assert_eq!(TokenGrid::parse_token_string(&grid.to_token_string(), classes).unwrap(), grid);
    }
    if let Ok(clues) = parse_clue_string(s, classes) {
        let text = clue_string(&clues, classes).unwrap();
        assert_eq!(parse_clue_string(&text, classes).unwrap(), clues);
    }
});

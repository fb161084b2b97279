//! Seed lists and number grids from the command line.

/// Accepts `a..b` (half-open), `a..=b`, or a comma-separated list.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>, String> {
    let list = list.trim();
    let parse = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("bad seed `{s}`: {e}"));
    let seeds: Vec<u64> = if let Some((a, b)) = list.split_once("..=") {
        (parse(a)?..=parse(b)?).collect()
    } else if let Some((a, b)) = list.split_once("..") {
        (parse(a)?..parse(b)?).collect()
    } else if list.is_empty() {
        Vec::new()
    } else {
        list.split(',').map(parse).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("seed list `{list}` is empty"));
    }
    Ok(seeds)
}

pub fn parse_floats(list: &str) -> Result<Vec<f64>, String> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad number `{s}`: {e}")))
        .collect()
}

//! TSPLIB-style CVRP files (CVRPLib), EUC_2D only.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::IoError;
use crate::vrp::{split_routes, Instance, Point};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Header,
    Coords,
    Demands,
    Depot,
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, IoError> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("cannot read {what} from `{tok}`")))
}

/// Parses a CVRPLib instance. The declared depot becomes node 0 and the
/// remaining nodes keep their file order. Coordinates are not rescaled.
pub fn parse_cvrplib(text: &str) -> Result<Instance, IoError> {
    let mut header: HashMap<String, (usize, String)> = HashMap::new();
    let mut coords: Vec<(usize, Point)> = Vec::new();
    let mut demands: Vec<(usize, u64)> = Vec::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut section = Section::Header;
    let mut seen = [false; 3];
    let mut section_line = [0usize; 3];
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let upper = trimmed.to_ascii_uppercase();
        let next = match upper.as_str() {
            "NODE_COORD_SECTION" => Some((Section::Coords, 0)),
            "DEMAND_SECTION" => Some((Section::Demands, 1)),
            "DEPOT_SECTION" => Some((Section::Depot, 2)),
            _ => None,
        };
        if let Some((s, idx)) = next {
            if seen[idx] {
                return Err(parse_err(line, format!("duplicate {trimmed}")));
            }
            seen[idx] = true;
            section_line[idx] = line;
            section = s;
            continue;
        }
        if upper == "EOF" {
            break;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        match section {
            Section::Header => {
                let (key, value) = trimmed
                    .split_once(':')
                    .ok_or_else(|| parse_err(line, format!("expected `KEY : VALUE`, found `{trimmed}`")))?;
                header.insert(key.trim().to_ascii_uppercase(), (line, value.trim().to_string()));
            }
            Section::Coords => {
                if toks.len() != 3 {
                    return Err(parse_err(line, "coordinate lines need `id x y`"));
                }
                let id = parse_num(toks[0], line, "node id")?;
                let x: f64 = parse_num(toks[1], line, "x coordinate")?;
                let y: f64 = parse_num(toks[2], line, "y coordinate")?;
                if !(x.is_finite() && y.is_finite()) {
                    return Err(parse_err(line, "non-finite coordinate"));
                }
                coords.push((id, (x, y)));
            }
            Section::Demands => {
                if toks.len() != 2 {
                    return Err(parse_err(line, "demand lines need `id demand`"));
                }
                demands.push((parse_num(toks[0], line, "node id")?, parse_num(toks[1], line, "demand")?));
            }
            Section::Depot => {
                for tok in toks {
                    let v: i64 = parse_num(tok, line, "depot id")?;
                    if v == -1 {
                        section = Section::Header;
                        break;
                    }
                    if v < 1 {
                        return Err(parse_err(line, format!("invalid depot id {v}")));
                    }
                    depots.push(v as usize);
                }
            }
        }
    }

    let eof = last_line.max(1);
    let get = |key: &str| header.get(key);
    let (dim_line, dim) = get("DIMENSION").ok_or(IoError::MissingSection {
        line: eof,
        section: "DIMENSION".into(),
    })?;
    let dim: usize = parse_num(dim, *dim_line, "DIMENSION")?;
    let (cap_line, cap) = get("CAPACITY").ok_or(IoError::MissingSection {
        line: eof,
        section: "CAPACITY".into(),
    })?;
    let capacity: u32 = parse_num(cap, *cap_line, "CAPACITY")?;
    match get("EDGE_WEIGHT_TYPE") {
        Some((line, t)) if !t.eq_ignore_ascii_case("EUC_2D") => {
            return Err(IoError::UnsupportedWeightType {
                line: *line,
                found: t.clone(),
            })
        }
        _ => {}
    }
    for (idx, name) in ["NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"].iter().enumerate() {
        if !seen[idx] {
            return Err(IoError::MissingSection {
                line: eof,
                section: name.to_string(),
            });
        }
    }
    if dim < 2 {
        return Err(parse_err(*dim_line, "DIMENSION must be at least 2"));
    }
    for (idx, name, count) in [(0, "NODE_COORD_SECTION", coords.len()), (1, "DEMAND_SECTION", demands.len())] {
        if count != dim {
            return Err(IoError::NodeCount {
                line: section_line[idx],
                section: name.into(),
                expected: dim,
                found: count,
            });
        }
    }
    let depot_id = match depots.as_slice() {
        [d] => *d,
        [] => return Err(parse_err(section_line[2], "DEPOT_SECTION lists no depot")),
        _ => return Err(parse_err(section_line[2], "only single-depot instances are supported")),
    };

    let mut point = vec![None; dim + 1];
    for (k, &(id, p)) in coords.iter().enumerate() {
        let line = section_line[0] + 1 + k;
        if id == 0 || id > dim {
            return Err(parse_err(line, format!("node id {id} outside 1..={dim}")));
        }
        if point[id].replace(p).is_some() {
            return Err(parse_err(line, format!("node {id} listed twice")));
        }
    }
    let mut demand = vec![None; dim + 1];
    for (k, &(id, d)) in demands.iter().enumerate() {
        let line = section_line[1] + 1 + k;
        if id == 0 || id > dim {
            return Err(parse_err(line, format!("node id {id} outside 1..={dim}")));
        }
        if demand[id].replace(d).is_some() {
            return Err(parse_err(line, format!("node {id} listed twice")));
        }
        if id == depot_id && d != 0 {
            return Err(IoError::DepotDemand { line, found: d });
        }
    }
    if depot_id > dim {
        return Err(parse_err(section_line[2], format!("depot id {depot_id} outside 1..={dim}")));
    }

    let depot = point[depot_id].expect("all ids present");
    let mut customers = Vec::with_capacity(dim - 1);
    let mut cust_demands = Vec::with_capacity(dim - 1);
    for id in (1..=dim).filter(|&id| id != depot_id) {
        customers.push(point[id].expect("all ids present"));
        let d = demand[id].expect("all ids present");
        let d = u32::try_from(d).map_err(|_| parse_err(section_line[1], format!("demand {d} too large")))?;
        cust_demands.push(d);
    }
    let mut inst = Instance::new(depot, customers, cust_demands, capacity)
        .map_err(|e| parse_err(section_line[1], e.to_string()))?;
    if let Some((_, name)) = get("NAME") {
        inst.name = Some(name.clone());
    }
    Ok(inst)
}

/// Writes `instance` in CVRPLib form with the depot as node 1. `NAME` is
/// emitted only for named instances.
pub fn write_cvrplib(instance: &Instance) -> String {
    let mut s = String::new();
    let n = instance.num_nodes();
    if let Some(name) = &instance.name {
        let _ = writeln!(s, "NAME : {name}");
    }
    let _ = writeln!(s, "TYPE : CVRP");
    let _ = writeln!(s, "DIMENSION : {n}");
    let _ = writeln!(s, "EDGE_WEIGHT_TYPE : EUC_2D");
    let _ = writeln!(s, "CAPACITY : {}", instance.capacity);
    s.push_str("NODE_COORD_SECTION\n");
    for i in 0..n {
        let (x, y) = instance.coord(i);
        let _ = writeln!(s, "{} {x:?} {y:?}", i + 1);
    }
    s.push_str("DEMAND_SECTION\n");
    for i in 0..n {
        let _ = writeln!(s, "{} {}", i + 1, instance.demand(i));
    }
    s.push_str("DEPOT_SECTION\n1\n-1\nEOF\n");
    s
}

/// Plain route listing: one `Route #r: ...` line per route (customers
/// numbered from 1 as in CVRPLib solutions) and a final `Cost` line.
pub fn format_routes(nodes: &[usize], cost: f64) -> String {
    let mut s = String::new();
    for (r, route) in split_routes(nodes).iter().enumerate() {
        let ids: Vec<String> = route.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "Route #{}: {}", r + 1, ids.join(" "));
    }
    let _ = writeln!(s, "Cost {cost}");
    s
}

/// Translates the bounding box to the origin and divides by its larger
/// side. Instances already inside the unit square are returned unchanged
/// with factor 1. Costs on the result times the factor give original costs.
pub fn scale_instance(instance: &Instance) -> Result<(Instance, f64), IoError> {
    let pts: Vec<Point> = (0..instance.num_nodes()).map(|i| instance.coord(i)).collect();
    let inside = pts.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
    if inside && pts.iter().any(|p| *p != pts[0]) {
        return Ok((instance.clone(), 1.0));
    }
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let extent = (max_x - min_x).max(max_y - min_y);
    if !(extent > 0.0) {
        return Err(IoError::Format("cannot scale an instance whose points all coincide".into()));
    }
    let f = |(x, y): Point| (((x - min_x) / extent).clamp(0.0, 1.0), ((y - min_y) / extent).clamp(0.0, 1.0));
    let mut out = instance.clone();
    out.depot = f(instance.depot);
    for (dst, &src) in out.customers.iter_mut().zip(&instance.customers) {
        *dst = f(src);
    }
    Ok((out, extent))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "NAME : tiny\nTYPE : CVRP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 10\nNODE_COORD_SECTION\n1 0 0\n2 3 4\n3 6 8\nDEMAND_SECTION\n1 0\n2 4\n3 5\nDEPOT_SECTION\n1\n-1\nEOF\n";

    #[test]
    fn parses_minimal_file() {
        let inst = parse_cvrplib(TINY).unwrap();
        assert_eq!(inst.num_customers(), 2);
        assert_eq!(inst.capacity, 10);
        assert_eq!(inst.customers, vec![(3.0, 4.0), (6.0, 8.0)]);
        assert_eq!(inst.demands, vec![4, 5]);
        assert_eq!(inst.name.as_deref(), Some("tiny"));
    }

    #[test]
    fn round_trip() {
        let inst = parse_cvrplib(TINY).unwrap();
        assert_eq!(parse_cvrplib(&write_cvrplib(&inst)).unwrap(), inst);
    }

    #[test]
    fn depot_not_first_is_moved_to_zero() {
        let text = TINY.replace("1 0\n2 4", "1 4\n2 0").replace("DEPOT_SECTION\n1", "DEPOT_SECTION\n2");
        let inst = parse_cvrplib(&text).unwrap();
        assert_eq!(inst.depot, (3.0, 4.0));
        assert_eq!(inst.customers, vec![(0.0, 0.0), (6.0, 8.0)]);
        assert_eq!(inst.demands, vec![4, 5]);
    }

    #[test]
    fn distinct_errors_with_lines() {
        let e = parse_cvrplib(&TINY.replace("EUC_2D", "GEO")).unwrap_err();
        assert!(matches!(e, IoError::UnsupportedWeightType { line: 4, .. }), "{e:?}");
        let e = parse_cvrplib(&TINY.replace("DEMAND_SECTION\n1 0\n2 4\n3 5\n", "")).unwrap_err();
        assert!(matches!(e, IoError::MissingSection { ref section, .. } if section == "DEMAND_SECTION"), "{e:?}");
        let e = parse_cvrplib(&TINY.replace("1 0\n2 4", "1 2\n2 4")).unwrap_err();
        assert!(matches!(e, IoError::DepotDemand { line: 11, found: 2 }), "{e:?}");
        let e = parse_cvrplib(&TINY.replace("DIMENSION : 3", "DIMENSION : 4")).unwrap_err();
        assert!(matches!(e, IoError::NodeCount { line: 6, expected: 4, found: 3, .. }), "{e:?}");
        let e = parse_cvrplib(&TINY.replace("3 6 8", "3 6 x")).unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 9, .. }), "{e:?}");
        let e = parse_cvrplib(&TINY.replace("CAPACITY : 10\n", "")).unwrap_err();
        assert!(matches!(e, IoError::MissingSection { ref section, .. } if section == "CAPACITY"), "{e:?}");
    }

    #[test]
    fn garbage_never_panics() {
        for text in ["", "EOF", ":::", "DEPOT_SECTION\n-5", "DIMENSION : 99999999999999999999"] {
            assert!(parse_cvrplib(text).is_err());
        }
    }

    #[test]
    fn scaling() {
        let unit = Instance::new((0.1, 0.2), vec![(0.9, 0.5)], vec![1], 5).unwrap();
        assert_eq!(scale_instance(&unit).unwrap().1, 1.0);
        let big = Instance::new((0.0, 0.0), vec![(1000.0, 500.0), (250.0, 1000.0)], vec![1, 1], 5).unwrap();
        let (s, f) = scale_instance(&big).unwrap();
        assert_eq!(f, 1000.0);
        assert_eq!(s.customers[0], (1.0, 0.5));
        let same = Instance::new((5.0, 5.0), vec![(5.0, 5.0)], vec![1], 5).unwrap();
        assert!(scale_instance(&same).is_err());
    }

    #[test]
    fn routes_listing() {
        assert_eq!(format_routes(&[0, 2, 1, 0, 3, 0], 12.5), "Route #1: 2 1\nRoute #2: 3\nCost 12.5\n");
    }
}

//! Newline-delimited JSON scene files.
//!
//! The first line is a header `{"format":"catf-scenes","version":1,"dt":..,"m":..,"H":..,"scenes":N}`,
//! followed by one scene per line. Coordinates are printed with six decimals.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{AgentTrack, MapData, RoadTemplate, Scene};
use crate::error::{Error, Result};
use crate::geometry::{AgentState, Point, Trajectory};

pub const FORMAT: &str = "catf-scenes";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub dt: f64,
    pub m: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    /// Number of scene records that follow.
    pub scenes: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: u32,
    states: Vec<(i64, f64, f64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    #[serde(default)]
    template: Option<RoadTemplate>,
    map: MapData,
    agents: Vec<AgentRecord>,
    av_id: u32,
    ref_time: i64,
}

fn num(out: &mut String, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::invalid("cannot serialize a non-finite coordinate"));
    }
    write!(out, "{v:.6}").unwrap();
    Ok(())
}

fn points(out: &mut String, pts: &[Point]) -> Result<()> {
    out.push('[');
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        num(out, p[0])?;
        out.push(',');
        num(out, p[1])?;
        out.push(']');
    }
    out.push(']');
    Ok(())
}

fn scene_line(scene: &Scene) -> Result<String> {
    let mut s = String::with_capacity(16 * 1024);
    s.push_str("{\"scene_id\":");
    s.push_str(&serde_json::to_string(&scene.scene_id).unwrap());
    if let Some(t) = scene.template {
        write!(s, ",\"template\":\"{t}\"").unwrap();
    }
    s.push_str(",\"map\":{\"drivable\":[");
    for (i, poly) in scene.map.drivable.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        points(&mut s, &poly.vertices)?;
    }
    s.push_str("],\"lanes\":[");
    for (i, lane) in scene.map.lanes.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        points(&mut s, &lane.points)?;
    }
    s.push_str("]},\"agents\":[");
    for (i, a) in scene.agents.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{{\"id\":{},\"states\":[", a.id).unwrap();
        for (j, st) in a.trajectory.states().iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "[{},", st.t).unwrap();
            num(&mut s, st.x)?;
            s.push(',');
            num(&mut s, st.y)?;
            s.push(']');
        }
        s.push_str("]}");
    }
    write!(s, "],\"av_id\":{},\"ref_time\":{}}}", scene.av_id, scene.ref_time).unwrap();
    Ok(s)
}

pub fn write_dataset<W: Write>(mut w: W, scenes: &[Scene]) -> Result<()> {
    let (dt, m, h) = match scenes.first() {
        Some(s) => (s.dt, s.history_len, s.horizon),
        None => (0.1, 10, 50),
    };
    if let Some(s) = scenes
        .iter()
        .find(|s| s.dt != dt || s.history_len != m || s.horizon != h)
    {
        return Err(Error::invalid(format!(
            "scene {} disagrees with the dataset timing (dt, m, H)",
            s.scene_id
        )));
    }
    let mut header = String::new();
    write!(
        header,
        "{{\"format\":\"{FORMAT}\",\"version\":{VERSION},\"dt\":{},\"m\":{m},\"H\":{h},\"scenes\":{}}}",
        serde_json::to_string(&dt).unwrap(),
        scenes.len()
    )
    .unwrap();
    writeln!(w, "{header}")?;
    for scene in scenes {
        writeln!(w, "{}", scene_line(scene)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), scenes)
}

fn format_err(line: usize, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        offset,
        message: message.into(),
    }
}

pub fn read_dataset<R: BufRead>(mut r: R) -> Result<(DatasetHeader, Vec<Scene>)> {
    let mut buf = String::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut header: Option<DatasetHeader> = None;
    let mut scenes = Vec::new();
    loop {
        buf.clear();
        let n = r.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let start = offset;
        offset += n as u64;
        if !buf.ends_with('\n') {
            return Err(format_err(
                line_no,
                start,
                format!("record truncated at byte {offset} (no line terminator)"),
            ));
        }
        let text = buf.trim_end();
        if text.is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: DatasetHeader = serde_json::from_str(text)
                    .map_err(|e| format_err(line_no, start, format!("invalid header: {e}")))?;
                if h.format != FORMAT || h.version != VERSION {
                    return Err(format_err(
                        line_no,
                        start,
                        format!("unsupported format {} version {}", h.format, h.version),
                    ));
                }
                header = Some(h);
            }
            Some(h) => {
                let rec: SceneRecord = serde_json::from_str(text)
                    .map_err(|e| format_err(line_no, start, format!("invalid scene record: {e}")))?;
                let scene = into_scene(rec, h).map_err(|e| format_err(line_no, start, e.to_string()))?;
                scenes.push(scene);
            }
        }
    }
    let header = header.ok_or_else(|| format_err(0, 0, "missing header record"))?;
    if scenes.len() != header.scenes {
        return Err(format_err(
            line_no,
            offset,
            format!(
                "file ends at byte {offset} after {} of {} scene records",
                scenes.len(),
                header.scenes
            ),
        ));
    }
    Ok((header, scenes))
}

fn into_scene(rec: SceneRecord, h: &DatasetHeader) -> Result<Scene> {
    let agents = rec
        .agents
        .into_iter()
        .map(|a| {
            let states = a.states.into_iter().map(|(t, x, y)| AgentState::new(t, x, y)).collect();
            Ok(AgentTrack {
                id: a.id,
                trajectory: Trajectory::new(states, h.dt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        scene_id: rec.scene_id,
        template: rec.template,
        map: rec.map,
        agents,
        av_id: rec.av_id,
        ref_time: rec.ref_time,
        history_len: h.m,
        horizon: h.horizon,
        dt: h.dt,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    Ok(read_dataset(BufReader::new(File::open(path)?))?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GenConfig};

    fn sample() -> Vec<Scene> {
        generate_dataset(
            &GenConfig {
                agents: 2,
                ..GenConfig::default()
            },
            &RoadTemplate::ALL,
            6,
            11,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let scenes = sample();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &scenes).unwrap();
        let (header, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(header.scenes, 6);
        assert_eq!(back, scenes);
        // and byte-identical on a second pass
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"format\":\"catf-scenes\",\"version\":1,"));
        assert!(read_dataset(buf.as_slice()).unwrap().1.is_empty());
    }

    #[test]
    fn truncation_names_byte_offset() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &sample()).unwrap();
        // cut mid-record
        let cut = buf.len() - 100;
        let line_start = buf[..cut].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        match read_dataset(&buf[..cut]) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, line_start as u64);
                assert!(message.contains(&cut.to_string()), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        // cut at a record boundary
        match read_dataset(&buf[..line_start]) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, line_start as u64);
                assert!(message.contains("5 of 6"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &sample()[..1]).unwrap();
        buf.extend_from_slice(b"{\"scene_id\": 3}\n");
        match read_dataset(buf.as_slice()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(read_dataset(&b""[..]).is_err());
        assert!(
            read_dataset(&b"{\"format\":\"other\",\"version\":1,\"dt\":0.1,\"m\":1,\"H\":1,\"scenes\":0}\n"[..])
                .is_err()
        );
    }
}

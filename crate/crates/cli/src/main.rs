use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tokio::net::TcpListener;

use tilewall::control::{ControlService, EnvStore, SlotConfig};
use tilewall::display::DisplayNode;
use tilewall::geometry::{build_wall, TileGrid, TileId, WallConfig};
use tilewall::protocol::Role;
use tilewall::pyramid::build_pyramid;
use tilewall::raster::{Pattern, Raster};
use tilewall::source::{FrameProvider, SourceClient, SourceConfig, SourceError};
use tilewall_net::control::ControlRuntimeConfig;
use tilewall_net::{run_display, run_source, spawn_control, DisplayRuntimeConfig, SourceRuntimeConfig};
use tilewall_sim::{StitchMode, Scenario};

/// Usage errors; 2 and 3 belong to the source clients.
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "tilewall", version, about = "Tiled display wall middleware")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the control service.
    Control(ControlArgs),
    /// Run one display node.
    Display(DisplayArgs),
    /// Publish a still image or pattern.
    Send(SendArgs),
    /// Publish a paced live stream.
    Stream(StreamArgs),
    /// Simulated wall runs.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Wall geometry tools.
    #[command(subcommand)]
    Geometry(GeometryCmd),
    /// Gigapixel image pyramids.
    #[command(subcommand)]
    Pyramid(PyramidCmd),
}

#[derive(Args)]
struct ControlArgs {
    /// Wall configuration; the 4×2 reference wall if omitted.
    #[arg(long)]
    wall: Option<PathBuf>,
    #[arg(long, default_value = "0.0.0.0:7700")]
    listen_proto: String,
    /// WebSocket endpoint for operator UIs.
    #[arg(long, default_value = "0.0.0.0:7701")]
    listen_ui: String,
    /// Saved environments; kept in memory if omitted.
    #[arg(long)]
    env_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    max_projections: usize,
}

#[derive(Args)]
struct DisplayArgs {
    #[arg(long)]
    wall: Option<PathBuf>,
    /// Zero-based `col,row`.
    #[arg(long, value_parser = parse_tile)]
    tile: TileId,
    #[arg(long)]
    control: String,
    /// Shared read-only pyramid store for still content.
    #[arg(long)]
    pyramid_root: Option<PathBuf>,
    /// Render off-screen only. Windowed output is not implemented, so this is always the case.
    #[arg(long)]
    headless: bool,
    /// Accepted for launcher compatibility. Display nodes dial out to control and sources.
    #[arg(long)]
    listen: Option<String>,
    /// Write the framebuffer as PPM after every presented change.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    control: String,
    /// Name shown to operators; derived from the input if omitted.
    #[arg(long)]
    name: Option<String>,
    /// Where displays connect for frames. The bound address is advertised as is.
    #[arg(long, default_value = "127.0.0.1:0")]
    data_listen: String,
    /// Pattern size as `WxH`.
    #[arg(long, default_value = "1920x1080", value_parser = parse_size)]
    size: (u32, u32),
}

#[derive(Args)]
struct SendArgs {
    #[command(flatten)]
    common: SourceArgs,
    #[arg(long, conflicts_with = "pattern", required_unless_present = "pattern")]
    image: Option<PathBuf>,
    #[arg(long)]
    pattern: Option<Pattern>,
    /// Offer a thumbnail to UIs.
    #[arg(long)]
    thumbnail: bool,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    common: SourceArgs,
    #[arg(long, default_value_t = 60)]
    fps: u32,
    /// A pattern name or `filesequence:<dir>`.
    #[arg(long)]
    source: String,
    #[arg(long, default_value_t = 50)]
    latency_ms: u64,
    /// End the stream after this many frames.
    #[arg(long)]
    frames: Option<u64>,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario and print its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stitch a snapshot directory into one wall image.
    Stitch {
        dir: PathBuf,
        /// Draw bezel gaps.
        #[arg(long)]
        mullions: bool,
        /// Output PPM; `<dir>/wall.ppm` if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GeometryCmd {
    /// Print the derived layout of a wall configuration.
    Info { wall: PathBuf },
}

#[derive(Subcommand)]
enum PyramidCmd {
    /// Build a tile pyramid from an image.
    Build {
        image: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile_size: u32,
        /// Output directory; `<image stem>.pyramid` beside the image if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_tile(s: &str) -> Result<TileId, String> {
    let (c, r) = s.split_once(',').ok_or("expected col,row")?;
    let col = c.trim().parse().map_err(|_| format!("bad column `{c}`"))?;
    let row = r.trim().parse().map_err(|_| format!("bad row `{r}`"))?;
    Ok(TileId::new(col, row))
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let w: u32 = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn load_wall(path: Option<&Path>) -> Result<TileGrid> {
    let config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            WallConfig::from_json(&text).with_context(|| p.display().to_string())?
        }
        None => WallConfig::reference_wall(),
    };
    Ok(build_wall(&config)?)
}

fn load_image(path: &Path) -> Result<Raster, SourceError> {
    let img = image::open(path).map_err(|e| SourceError::Provider(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Raster::from_rgb(w, h, rgb.into_raw())?)
}

fn image_sequence(dir: &Path) -> Result<FrameProvider, SourceError> {
    let read = std::fs::read_dir(dir).map_err(|e| SourceError::Provider(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| image::ImageFormat::from_path(p).is_ok())
        .collect();
    paths.sort();
    FrameProvider::file_sequence_with(paths, Box::new(load_image))
}

fn print_line(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn control(args: ControlArgs) -> Result<ExitCode> {
    let grid = load_wall(args.wall.as_deref())?;
    let envs = match &args.env_dir {
        Some(dir) => EnvStore::dir(dir).with_context(|| format!("opening {}", dir.display()))?,
        None => EnvStore::memory(),
    };
    let service = ControlService::new(grid, SlotConfig::new(args.max_projections)?, envs);
    let proto = TcpListener::bind(&args.listen_proto)
        .await
        .with_context(|| format!("binding {}", args.listen_proto))?;
    let ui = TcpListener::bind(&args.listen_ui)
        .await
        .with_context(|| format!("binding {}", args.listen_ui))?;
    print_line(&format!("proto listening on {}", proto.local_addr()?));
    print_line(&format!("ui listening on {}", ui.local_addr()?));
    let handle = spawn_control(service, proto, Some(ui), ControlRuntimeConfig::default());
    ctrl_c().await;
    let service = handle.shutdown().await;
    info!("control stopped at revision {}", service.scene().revision());
    Ok(ExitCode::SUCCESS)
}

async fn display(args: DisplayArgs) -> Result<ExitCode> {
    let grid = load_wall(args.wall.as_deref())?;
    if !grid.contains_tile(args.tile) {
        bail!("tile {},{} is not on a {}×{} wall", args.tile.col, args.tile.row, grid.cols(), grid.rows());
    }
    if !args.headless {
        info!("no windowed output; rendering headless");
    }
    if let Some(addr) = &args.listen {
        info!("ignoring --listen {addr}: display nodes dial out");
    }
    if let Some(dir) = &args.dump_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let node = DisplayNode::new(grid, args.tile, args.pyramid_root.clone());
    let mut config = DisplayRuntimeConfig::new(args.control.clone());
    config.dump_dir = args.dump_dir.clone();
    let node = run_display(node, config, None, ctrl_c()).await?;
    info!("display {} stopped at revision {}", node.tile(), node.revision());
    Ok(ExitCode::SUCCESS)
}

async fn publish(common: SourceArgs, role: Role, config: SourceConfig, provider: FrameProvider, fps: Option<u32>) -> Result<ExitCode> {
    let data = TcpListener::bind(&common.data_listen)
        .await
        .with_context(|| format!("binding {}", common.data_listen))?;
    let mut config = config;
    config.role = role;
    config.data_addr = Some(data.local_addr()?.to_string());
    let client = SourceClient::new(config, provider)?;
    let runtime = SourceRuntimeConfig {
        control: common.control,
        fps,
        heartbeat_every: Duration::from_secs(1),
    };
    let outcome = match run_source(client, data, runtime, ctrl_c()).await {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(3));
        }
    };
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
    }
    let c = outcome.client.counters();
    info!("{} frames produced, {} sent", c.frames_produced, c.frames_sent);
    Ok(ExitCode::from(outcome.exit_code as u8))
}

async fn send(args: SendArgs) -> Result<ExitCode> {
    let (provider, default_name) = match (&args.image, args.pattern) {
        (Some(path), _) => {
            let image = match load_image(path) {
                Ok(i) => i,
                Err(e) => bail!(e),
            };
            let name = path.file_name().map_or("image".into(), |n| n.to_string_lossy().into_owned());
            (FrameProvider::still(image), name)
        }
        (None, Some(p)) => {
            let (w, h) = args.common.size;
            (FrameProvider::still(p.render(w, h, 0)), format!("{p:?}").to_lowercase())
        }
        (None, None) => unreachable!("clap requires one of --image and --pattern"),
    };
    let mut config = SourceConfig::new(args.common.name.clone().unwrap_or(default_name), Role::Sender);
    config.thumbnail = args.thumbnail;
    publish(args.common, Role::Sender, config, provider, None).await
}

async fn stream(args: StreamArgs) -> Result<ExitCode> {
    let (provider, default_name) = match args.source.strip_prefix("filesequence:") {
        Some(dir) => {
            let dir = Path::new(dir);
            let name = dir.file_name().map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
            (image_sequence(dir)?, name)
        }
        None => {
            let pattern: Pattern = args.source.parse()?;
            let (w, h) = args.common.size;
            (FrameProvider::pattern(pattern, w, h)?, args.source.clone())
        }
    };
    let provider = match args.frames {
        Some(n) => provider.with_limit(n),
        None => provider,
    };
    let mut config = SourceConfig::new(args.common.name.clone().unwrap_or(default_name), Role::Streamer);
    config.latency_budget_us = args.latency_ms * 1000;
    publish(args.common, Role::Streamer, config, provider, Some(args.fps)).await
}

fn sim(cmd: SimCmd) -> Result<ExitCode> {
    match cmd {
        SimCmd::Run { scenario, seed, out } => {
            let s = Scenario::load(&scenario)?;
            let report = tilewall_sim::run(&s, seed, out.as_deref())?;
            print_line(&report.to_json());
            if let Some(f) = report.first_failure() {
                eprintln!("assertion failed: {}: {}", f.step, f.detail);
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        SimCmd::Stitch { dir, mullions, out } => {
            let mode = if mullions { StitchMode::Mullions } else { StitchMode::Contiguous };
            let wall = tilewall_sim::stitch_dir(&dir, mode)?;
            let out = out.unwrap_or_else(|| dir.join("wall.ppm"));
            std::fs::write(&out, wall.to_ppm()).with_context(|| format!("writing {}", out.display()))?;
            print_line(&format!("{} ({}×{})", out.display(), wall.width(), wall.height()));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn geometry(cmd: GeometryCmd) -> Result<ExitCode> {
    let GeometryCmd::Info { wall } = cmd;
    let grid = load_wall(Some(&wall))?;
    let (ew, eh) = grid.effective_resolution();
    let (cw, ch) = grid.canvas_size();
    let (pw, ph) = grid.physical_extent();
    let (gx, gy) = grid.tile_gap_mm();
    let (px, py) = grid.pixel_pitch_mm();
    let tiles: Vec<_> = grid
        .tiles()
        .map(|t| {
            let r = grid.tile_rect(t);
            let o = grid.tile_origin_mm(t);
            serde_json::json!({
                "tile": t.to_string(),
                "col": t.col,
                "row": t.row,
                "canvas_rect": [r.x, r.y, r.w, r.h],
                "origin_mm": [o.x, o.y],
            })
        })
        .collect();
    let info = serde_json::json!({
        "mode": grid.mode(),
        "cols": grid.cols(),
        "rows": grid.rows(),
        "effective_resolution": [ew, eh],
        "canvas": [cw, ch],
        "physical_extent_mm": [pw, ph],
        "tile_gap_mm": [gx, gy],
        "pixel_pitch_mm": [px, py],
        "tiles": tiles,
    });
    print_line(&serde_json::to_string_pretty(&info)?);
    Ok(ExitCode::SUCCESS)
}

fn pyramid(cmd: PyramidCmd) -> Result<ExitCode> {
    let PyramidCmd::Build { image, tile_size, out } = cmd;
    let source = load_image(&image)?;
    let out = out.unwrap_or_else(|| {
        let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        image.with_file_name(format!("{stem}.pyramid"))
    });
    let index = build_pyramid(&source, tile_size, &out)?;
    print_line(&format!(
        "{}: {}×{} in {} levels, {} tiles",
        out.display(),
        index.source_w,
        index.source_h,
        index.levels.len(),
        index.checksums.len()
    ));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Cmd::Sim(c) => sim(c),
        Cmd::Geometry(c) => geometry(c),
        Cmd::Pyramid(c) => pyramid(c),
        cmd => {
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: starting runtime: {e}");
                    return ExitCode::FAILURE;
                }
            };
            rt.block_on(async {
                match cmd {
                    Cmd::Control(a) => control(a).await,
                    Cmd::Display(a) => display(a).await,
                    Cmd::Send(a) => send(a).await,
                    Cmd::Stream(a) => stream(a).await,
                    _ => unreachable!(),
                }
            })
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

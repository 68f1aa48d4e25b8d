//! The JSON service: answers a few requests in-process, or listens on an
//! address with `cargo run --example serve_api -- 127.0.0.1:8080`.

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;

use tftmulti::service::{router, serve, AppState};
use tftmulti::synthdata::{generate_cohort, SynthConfig, PRESSOR};
use tftmulti::tft::ModelConfig;
use tftmulti::timegrid::{prepare_dataset, PrepareOptions};
use tftmulti::trainer::{train, TrainConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cohort = generate_cohort(&SynthConfig {
        n_encounters: 48,
        bins: 40,
        pressor_known_future: true,
        seed: 9,
        ..SynthConfig::default()
    })?;
    let ds = prepare_dataset(
        &cohort.events,
        &cohort.statics,
        &cohort.schema,
        &PrepareOptions {
            past_len: 24,
            horizon: 12,
            ..PrepareOptions::default()
        },
    )?;
    let mut mc = ModelConfig::from_schema(&ds.schema, ds.past_len, ds.horizon);
    mc.hidden_size = 8;
    mc.num_heads = 2;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let model = train(&ds.train, &ds.schema, &mc, &tc)?.model;
    let subject = ds.test[0].encounter_id.clone();
    let state = Arc::new(AppState::new(model, ds.test, PRESSOR, ds.bin_minutes)?);

    if let Some(addr) = std::env::args().nth(1) {
        println!("listening on http://{addr}");
        serve(state, &addr).await?;
        return Ok(());
    }

    let app = router(state);
    let body = format!(r#"{{"subject": "{subject}", "scenarios": [{{"name": "all_ones"}}, {{"name": "all_zeros"}}]}}"#);
    let requests = [
        Request::get("/health").body(Body::empty())?,
        Request::get("/subjects").body(Body::empty())?,
        Request::post("/forecast").body(Body::from(body))?,
        Request::post("/forecast").body(Body::from(r#"{"subject": "nobody"}"#))?,
    ];
    for req in requests {
        let line = format!("{} {}", req.method(), req.uri());
        let resp = app.clone().oneshot(req).await?;
        let status = resp.status();
        let bytes = resp.into_body().collect().await?.to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        let shown: String = text.chars().take(300).collect();
        println!("{line} -> {status}\n  {shown}{}\n", if text.len() > 300 { " ..." } else { "" });
    }
    Ok(())
}

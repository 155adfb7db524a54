"""FastAPI service wrapping the experiment runner.

Jobs execute synchronously in the request: runs are desk scale and the
clients (CLI included) wait for the result.  Input problems map to 400,
request-shape problems to FastAPI's usual 422, anything that breaks mid-run
to 500; the CLI turns those into its exit codes.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..datakit import DataError
from ..harness import analysis, runner
from ..harness.config import ConfigError
from ..readops import ReadOpError
from ..registry import CheckpointError
from . import schemas

_BAD_REQUEST = (ConfigError, DataError, CheckpointError, ReadOpError, FileNotFoundError)


def create_app() -> FastAPI:
    app = FastAPI(title="prawn", version=__version__)

    @app.exception_handler(Exception)
    async def _unhandled(request: Request, exc: Exception) -> JSONResponse:
        if isinstance(exc, _BAD_REQUEST):
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        return JSONResponse(status_code=500, content={"detail": f"{type(exc).__name__}: {exc}"})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
        result = runner.run_experiment(req.experiment, out_dir=req.out_dir, seed=req.seed)
        return schemas.TrainResponse(
            final_test_accuracy=result.final_test,
            final_dev_accuracy=result.final_dev,
            best_epoch=result.best_epoch,
            adapt_curves=result.adapt_curves,
            checkpoints=result.checkpoints,
            files=result.files,
            wall_clock_seconds=result.wall_clock,
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_(req: schemas.EvalRequest) -> schemas.EvalResponse:
        return schemas.EvalResponse(metrics=runner.eval_checkpoint(req.experiment, req.checkpoint, seed=req.seed))

    @app.post("/adapt", response_model=schemas.AdaptResponse)
    def adapt(req: schemas.AdaptRequest) -> schemas.AdaptResponse:
        config = req.experiment
        seed = config.seed if req.seed is None else req.seed
        data = runner.build_task_data(config)
        if not data.held_out:
            raise ConfigError("adapt needs held-out tasks in the data config")
        curves = {
            tid: runner.out_of_task_adapt(config, req.checkpoint, data, tid, config.adapt.sample_counts, seed)
            for tid in sorted(data.held_out)
        }
        files: dict[str, str] = {}
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        adapt_path = out / "adapt.csv"
        with open(adapt_path, "w", encoding="utf-8") as fh:
            fh.write("task,samples,accuracy\n")
            for tid in sorted(curves):
                for count in sorted(curves[tid]):
                    fh.write(f"{tid},{count},{curves[tid][count]:.6f}\n")
        files["adapt"] = str(adapt_path)
        return schemas.AdaptResponse(curves=curves, files=files)

    @app.post("/weights", response_model=schemas.WeightsResponse)
    def weights(req: schemas.WeightsRequest) -> schemas.WeightsResponse:
        config = req.experiment
        seed = config.seed if req.seed is None else req.seed
        data = runner.build_task_data(config)
        beta = runner.estimate_weights(config, data, seed)
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        beta_path = out / "beta.csv"
        beta.to_csv(beta_path)
        return schemas.WeightsResponse(
            task_ids=list(beta.task_ids),
            values=[[float(v) for v in row] for row in beta.values],
            q_exp=beta.q_exp,
            files={"beta": str(beta_path)},
        )

    @app.post("/analyze/pca", response_model=schemas.PcaResponse)
    def analyze_pca(req: schemas.PcaRequest) -> schemas.PcaResponse:
        log = analysis.TrajectoryLog.load_npz(req.trajectory)
        projection = analysis.pca_trajectory(log, dims=req.dims)
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "pca_projection.csv"
        analysis.write_pca_csv(projection, csv_path)
        return schemas.PcaResponse(
            variances=projection.variances,
            joint=projection.joint,
            warnings=projection.warnings,
            files={"projection": str(csv_path)},
        )

    @app.post("/analyze/neurons", response_model=schemas.NeuronsResponse)
    def analyze_neurons(req: schemas.NeuronsRequest) -> schemas.NeuronsResponse:
        config = req.experiment
        seed = config.seed if req.seed is None else req.seed
        data = runner.build_task_data(config)
        if not data.is_text:
            raise ConfigError("neuron analysis needs text data (a manifest of tsv tasks)")
        task_classes = {tid: s["train"].num_classes for tid, s in data.in_task.items()}
        registry, model = runner.build_model(config, data, task_classes, seed)
        from ..registry import load_checkpoint_values

        load_checkpoint_values(registry, req.checkpoint)
        stats = analysis.neuron_feature_stat(
            model,
            [data.in_task[tid]["test"] for tid in sorted(data.in_task)],
            data.vocab,
            data.partition,
        )
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "neuron_stats.csv"
        analysis.write_neuron_csv(stats, csv_path)

        def to_scores(rows):
            return [schemas.WordScore(word=r.word, part=r.part, occurrences=r.occurrences, peak_count=r.peak_count, score=r.score) for r in rows]

        return schemas.NeuronsResponse(
            layer_width=stats.layer_width,
            n_sequences=stats.n_sequences,
            total_increments=stats.total_increments,
            top_intersection=to_scores(stats.top("intersection", req.top_k)),
            top_complement=to_scores(stats.top("complement", req.top_k)),
            files={"stats": str(csv_path)},
        )

    @app.post("/synth-gen", response_model=schemas.SynthGenResponse)
    def synth_gen(req: schemas.SynthGenRequest) -> schemas.SynthGenResponse:
        files = runner.generate_synthetic_corpus(req.synthetic, req.out_dir)
        total = req.synthetic.tasks + req.synthetic.held_out_tasks
        return schemas.SynthGenResponse(manifest=files["manifest"], task_count=total, files=files)

    return app


app = create_app()

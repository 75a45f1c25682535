"""FastAPI service wrapping the DIF toolkit.

Endpoints mirror the CLI subcommands: ``/prepare``, ``/compare``,
``/dif/{method}``, and ``/simulate``. Toolkit errors map to structured
bodies whose ``category`` drives the client's exit code: ``config`` ->
400, ``data`` -> 422, ``numerical`` -> 500.
"""

from __future__ import annotations

import dataclasses
import json

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..data import DifDataset, RecodeSpec, ingest
from ..datasets import load_verbal_aggression
from ..dif import lord_test, lr_dif, mh_dif, mlr_dif
from ..errors import ConfigError, DifkitError, PreconditionError
from ..irt import ItemResponseMatrix
from ..reports import (
    compare_models,
    decision_to_json_dict,
    render_decision,
    render_dataset_summary,
    render_model_comparison,
    render_sim_report,
    summarize_dataset,
)
from ..simulate import SimConfig, run_study
from . import schemas

_STATUS_BY_CATEGORY = {"config": 400, "data": 422, "numerical": 500}


def create_app() -> FastAPI:
    app = FastAPI(
        title="difkit service",
        description="DIF analysis for clustered binary survey items",
        version=__version__,
    )

    @app.exception_handler(DifkitError)
    async def _difkit_error(request: Request, exc: DifkitError):
        status = _STATUS_BY_CATEGORY.get(exc.category, 500)
        body = schemas.ErrorBody(
            error=schemas.ErrorDetail(category=exc.category, message=str(exc))
        )
        return JSONResponse(status_code=status, content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/prepare", response_model=schemas.PrepareResponse)
    def prepare(req: schemas.PrepareRequest):
        if (req.recode is None) == (req.recode_config_path is None):
            raise ConfigError(
                "provide exactly one of 'recode' or 'recode_config_path'"
            )
        if req.recode is not None:
            spec = RecodeSpec.from_json_dict(req.recode)
        else:
            spec = RecodeSpec.from_file(req.recode_config_path)
        ds = ingest(req.input_path, spec, delimiter=req.delimiter)
        if req.output_path:
            ds.to_csv(req.output_path)
        summary = summarize_dataset(ds)
        return schemas.PrepareResponse(
            summary=summary.to_json_dict(),
            rendered=render_dataset_summary(summary, fmt=req.format),
            output_path=req.output_path,
        )

    @app.post("/compare", response_model=schemas.CompareResponse)
    def compare(req: schemas.CompareRequest):
        ds = DifDataset.read_canonical(req.dataset_path)
        report = compare_models(ds, method=req.method)
        return schemas.CompareResponse(
            report=report.to_json_dict(),
            rendered=render_model_comparison(report, fmt=req.format),
        )

    @app.post("/dif/{method}", response_model=schemas.DifResponse)
    def dif(method: str, req: schemas.DifRequest):
        if method in ("mh", "lr", "mlr"):
            if not req.dataset_path:
                raise ConfigError(f"'{method}' requires dataset_path")
            ds = DifDataset.read_canonical(req.dataset_path)
            if method == "mh":
                decision = mh_dif(ds, alpha=req.alpha)
            elif method == "lr":
                decision = lr_dif(ds, alpha=req.alpha, rule=req.rule)
            else:
                decision = mlr_dif(
                    ds, interaction=req.interaction,
                    alpha=req.alpha, method=req.method,
                )
        elif method == "lord":
            if req.matrix_path:
                matrix = ItemResponseMatrix.from_csv(
                    req.matrix_path, group_column=req.group_column
                )
            else:
                matrix = load_verbal_aggression()
            if not req.studied_item:
                raise ConfigError("'lord' requires studied_item")
            decision = lord_test(
                matrix, req.studied_item, item_set=req.item_set,
                alpha=req.alpha,
                force_unit_discrimination=req.unit_discrimination,
            )
        else:
            raise ConfigError(
                f"unknown DIF method {method!r}; expected mh, lr, mlr, or lord"
            )
        return schemas.DifResponse(
            decision=decision_to_json_dict(decision),
            rendered=render_decision(decision, fmt=req.format),
        )

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        if (req.config is None) == (req.config_path is None):
            raise ConfigError(
                "provide exactly one of 'config' or 'config_path'"
            )
        if req.config is not None:
            obj = req.config
        else:
            try:
                with open(req.config_path, "r", encoding="utf-8") as fh:
                    obj = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"config is not valid JSON (line {exc.lineno}, "
                    f"column {exc.colno}): {exc.msg}"
                ) from exc
        try:
            config = SimConfig.from_json_dict(obj)
        except PreconditionError as exc:
            raise ConfigError(str(exc)) from exc
        if req.seed is not None:
            config = dataclasses.replace(config, seed=req.seed)
        report = run_study(config, methods=tuple(req.methods), alpha=req.alpha)
        return schemas.SimulateResponse(
            report=report.to_json_dict(),
            rendered=render_sim_report(report, fmt=req.format),
        )

    return app


app = create_app()

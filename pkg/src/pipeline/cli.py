import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from src.config import get_settings
from src.errors import exit_code_for

from .commands import MODEL_FILE, cmd_ablate, cmd_distill, cmd_eval, cmd_pretrain, cmd_quantize
from .config import load_run_config
from .report import report_schema

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genie", description="Zero-shot quantization of small BN CNNs")
    sub = parser.add_subparsers(dest="command", required=True)
    
    def _common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--out", type=Path, default=None, help="Output directory")
        p.add_argument("--log-level", default=None, help="Logging level (default from GENIE_LOG_LEVEL)")
        
    p = sub.add_parser("pretrain", help="Train the desk model")
    _common(p)
    
    p = sub.add_parser("distill", help="Distill calibration images from a model")
    _common(p)
    p.add_argument("--model", type=Path, default=None, help=f"Model checkpoint (default <out>/{MODEL_FILE})")
    
    p = sub.add_parser("quantize", help="Quantize a model with distilled data")
    _common(p)
    p.add_argument("--model", type=Path, default=None, help=f"Model checkpoint (default <out>/{MODEL_FILE})")
    p.add_argument("--data", type=Path, required=True, help="Distilled dataset file")
    
    p = sub.add_parser("eval", help="Top-1 accuracy of a float or quantized checkpoint")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", default="desk-test", help="desk-test, desk-train or idx:<images>,<labels>")
    p.add_argument("--samples", type=int, default=None)
    
    p = sub.add_parser("ablate", help="Run the ablation matrix and sweeps")
    _common(p)
    p.add_argument("--model", type=Path, default=None, help=f"Model checkpoint (default <out>/{MODEL_FILE})")
    
    sub.add_parser("schema", help="Print the report JSON schema")
    return parser


def _configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or get_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def run(args: argparse.Namespace) -> None:
    if args.command == "schema":
        print(json.dumps(report_schema(), indent=2))
        return
    
    cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    model_path = getattr(args, "model", None) or Path(cfg.out_dir) / MODEL_FILE
    
    if args.command == "pretrain":
        print(cmd_pretrain(cfg))
    elif args.command == "distill":
        data_path, trace_path = cmd_distill(cfg, model_path)
        print(data_path)
        print(trace_path)
    elif args.command == "quantize":
        q_path, report = cmd_quantize(cfg, model_path, args.data)
        print(q_path)
        print(f"fp32={report.fp32_accuracy:.2f} soft={report.quant_accuracy_soft:.2f} hard={report.quant_accuracy_hard:.2f}")
    elif args.command == "eval":
        print(f"{cmd_eval(model_path, args.dataset, args.samples):.2f}")
    elif args.command == "ablate":
        print(cmd_ablate(cfg, model_path))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(getattr(args, "log_level", None))
    try:
        run(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == 1:
            logger.exception(f"{args.command} failed")
        else:
            logger.error(f"{args.command} failed: {e}")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())

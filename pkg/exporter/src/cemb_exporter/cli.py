"""cemb-export command line: prompts file in, CEMB v1 store out."""

from __future__ import annotations

import argparse
import sys

from .encoders import DEFAULT_MODEL, ModelLoadError
from .export import ExportError, ExportJob, export
from .prompts_io import PromptFileError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cemb-export",
        description="Encode a rendered-prompt dump with a pre-trained "
                    "sentence encoder and write a CEMB v1 store.",
    )
    parser.add_argument("prompts", help="prompt dump file (row<TAB>col<TAB>text)")
    parser.add_argument("--model", default=DEFAULT_MODEL,
                        help="model identifier, or stub:<dim> for the "
                             "deterministic offline backend")
    parser.add_argument("--max-tokens", type=int, default=128,
                        help="token truncation length recorded in the header")
    parser.add_argument("--normalize", action="store_true",
                        help="L2-normalize pooled vectors")
    parser.add_argument("--out", required=True, help="output store path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(prompts_path=args.prompts, out_path=args.out,
                        model=args.model, max_tokens=args.max_tokens,
                        normalize=args.normalize)
        summary = export(job)
    except (ExportError, ModelLoadError, PromptFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {summary['count']} embeddings (dim {summary['dim']}) "
          f"to {summary['path']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

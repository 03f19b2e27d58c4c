import argparse
import json
import logging
import sys
from typing import List, Optional

from pydantic import BaseModel

import chanfuse.enhance_service
import chanfuse.features_service
import chanfuse.forward_service
import chanfuse.gradcheck_service
import chanfuse.rover_service
import chanfuse.score_service
import chanfuse.selftest_service
import chanfuse.train_toy_service
from chanfuse.config import RunConfig, load_config
from chanfuse.errors import ConfigError, DataError, NumericError, ShapeError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_INTERNAL = 4


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _emit(response: BaseModel) -> None:
    sys.stdout.write(response.model_dump_json(indent=2) + "\n")


def cmd_enhance(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Builds composites, provenance sidecars and EV rankings for every manifest session.
    """
    _emit(chanfuse.enhance_service.enhance(args.manifest, args.out_dir, config))
    return EXIT_OK


def cmd_features(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Writes log-mel, reference and cosIPD features of one composite.
    """
    _emit(chanfuse.features_service.extract(args.composite, args.out, config, args.gss_ref))
    return EXIT_OK


def cmd_forward(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Runs the encoder and writes CTC log-probabilities, optionally the attention maps.
    """
    _emit(
        chanfuse.forward_service.forward(args.features, args.out, config, args.weights, args.dump_attention)
    )
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Trains on the synthetic task and saves the weights.
    """
    _emit(chanfuse.train_toy_service.train(args.out_dir, config, args.pretrain_afe))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Finite-difference gradient checks; exits 3 when any check fails.
    """
    res = chanfuse.gradcheck_service.gradcheck(args.names, args.seeds, config.seed)
    _emit(res)
    return EXIT_OK if res.passed else EXIT_NUMERIC


def cmd_selftest(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Every gradient check and oracle; exits 3 when any fails.
    """
    res = chanfuse.selftest_service.selftest(args.seeds)
    _emit(res)
    return EXIT_OK if res.passed else EXIT_NUMERIC


def cmd_score(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Prints the WER table of one or more systems, or of their ROVER combination.
    """
    res = chanfuse.score_service.score(args.ref_manifest, args.hyps, args.rover, config.normalize_text, args.json)
    sys.stdout.write(res.table)
    return EXIT_OK


def cmd_rover(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Writes the ROVER combination of several hypothesis files.
    """
    _emit(chanfuse.rover_service.rover_files(args.hyps, args.out))
    return EXIT_OK


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML key/value configuration file")
    common.add_argument("--preset", help="ablation preset applied after the config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--allow-any-rate", action="store_const", const=True)
    common.add_argument("--cgcs-mode", choices=["mix", "mask"])
    common.add_argument("--f-ctx", type=int)
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = ArgumentParser(prog="chanfuse", description="Multi-channel channel-selection toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    enhance = commands.add_parser("enhance", parents=[common], help="WPE + beamforming composites")
    enhance.add_argument("manifest")
    enhance.add_argument("--out-dir", required=True)
    enhance.set_defaults(handler=cmd_enhance)

    features = commands.add_parser("features", parents=[common], help="model input features")
    features.add_argument("composite")
    features.add_argument("--out", required=True)
    features.add_argument("--gss-ref", help="externally separated mono reference signal")
    features.set_defaults(handler=cmd_features)

    forward = commands.add_parser("forward", parents=[common], help="encoder forward pass")
    forward.add_argument("features")
    forward.add_argument("--out", required=True)
    forward.add_argument("--weights")
    forward.add_argument("--dump-attention", metavar="PATH")
    forward.set_defaults(handler=cmd_forward)

    train = commands.add_parser("train-toy", parents=[common], help="train on the synthetic task")
    train.add_argument("--out-dir", required=True)
    train.add_argument("--pretrain-afe", action="store_true")
    train.set_defaults(handler=cmd_train_toy)

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    gradcheck.add_argument("names", nargs="*")
    gradcheck.add_argument("--seeds", type=int, default=10)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    selftest = commands.add_parser("selftest", parents=[common], help="all checks and oracles")
    selftest.add_argument("--seeds", type=int, default=10)
    selftest.set_defaults(handler=cmd_selftest)

    score = commands.add_parser("score", parents=[common], help="WER per scenario and macro")
    score.add_argument("ref_manifest")
    score.add_argument("hyps", nargs="+")
    score.add_argument("--rover", action="store_true")
    score.add_argument("--json", metavar="PATH")
    score.set_defaults(handler=cmd_score)

    rover = commands.add_parser("rover", parents=[common], help="combine hypothesis files")
    rover.add_argument("hyps", nargs="+")
    rover.add_argument("--out", required=True)
    rover.set_defaults(handler=cmd_rover)
    return parser


def _fail(e: Exception, code: int) -> int:
    logger.exception("Error processing request")
    res = dict()
    res["error"] = str(e)
    sys.stderr.write(json.dumps(res) + "\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(json.dumps({"error": str(e)}) + "\n")
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(
            args.config,
            args.preset,
            args.overrides,
            seed=args.seed,
            jobs=args.jobs,
            allow_any_rate=args.allow_any_rate,
            cgcs_mode=args.cgcs_mode,
            f_ctx=args.f_ctx,
        )
        return args.handler(args, config)
    except (UsageError, ConfigError) as e:
        return _fail(e, EXIT_USAGE)
    except NumericError as e:
        return _fail(e, EXIT_NUMERIC)
    except (DataError, ShapeError, ValueError) as e:
        return _fail(e, EXIT_DATA)
    except Exception as e:
        return _fail(e, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())

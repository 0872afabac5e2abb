import os
from dotenv import load_dotenv

from umbd import RefinementPipeline
from umbd.config import env_log_level, load_run_config

# Load environment variables from .env file
# Example .env:
#   UMBD_DEVICE=cpu
#   UMBD_SEED=3
#   UMBD_RUNS_DIR=runs
#   UMBD_LOG_LEVEL=DEBUG
load_dotenv()

# Defaults < config file < environment
config = load_run_config(os.environ.get("UMBD_CONFIG"))
print(f"Device: {config.device}")
print(f"Seed: {config.train.seed}")
print(f"Log level: {env_log_level()}")

if __name__ == "__main__":
    # Open a trained run by name; bare names are resolved under UMBD_RUNS_DIR
    run = os.environ.get("UMBD_RUN", "toy")
    pipeline = RefinementPipeline.from_run(run, data_dir=os.environ.get("UMBD_DATA"))
    print(f"Loaded run with T_train={pipeline.schedule.T_train} and prior '{pipeline.prior.kind.value}'")

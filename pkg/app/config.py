from dotenv import load_dotenv
import os

load_dotenv()

LOG_LEVEL = os.getenv("CVADAPT_LOG_LEVEL") or "INFO"
# Сколько строк запросов считать за один блок матрицы сходства
CHUNK_SIZE = int(os.getenv("CVADAPT_CHUNK_SIZE") or 2048)
HIST_BINS = int(os.getenv("CVADAPT_HIST_BINS") or 20)

from prometheus_client import Gauge, start_http_server

train_gauge = Gauge("mcaer_train", "", ["param"])


def start(port):
    start_http_server(port)


def export(record):
    for key in ["epoch", "loss", "val_acc", "lr"]:
        value = getattr(record, key)
        if value is None:
            continue
        train_gauge.labels(key).set(value)

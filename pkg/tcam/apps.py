from django.apps import AppConfig


class TcamConfig(AppConfig):
    name = 'tcam'
    label = 'tcam'
    verbose_name = 'Capacitive-RRAM TCAM simulator'

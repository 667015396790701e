from django.apps import AppConfig


class BundlecodecConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'bundlecodec'
    verbose_name = 'Streamline bundle codecs'
